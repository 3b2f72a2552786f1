use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgMatches, Command};
use lix_cli::ablate::Axis;
use lix_cli::commands;
use lix_cli::config::{RunConfig, KEYS};
use lix_cli::exit::Failure;

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help("key = value configuration file, applied before flags")];
    args.extend(KEYS.iter().map(|(k, help)| Arg::new(*k).long(*k).value_name("VALUE").help(*help)));
    args
}

fn cli() -> Command {
    let axes: Vec<&str> = Axis::ALL.iter().map(|a| a.name()).collect();
    Command::new("lix")
        .about("Logit and feature distillation on synthetic RGB-D scenes")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(Command::new("gen-data").about("Generate and cache a synthetic dataset").args(config_args()))
        .subcommand(Command::new("train").about("Train a teacher or distill a student").args(config_args()))
        .subcommand(
            Command::new("ablate")
                .about("Run an ablation grid over several seeds")
                .arg(Arg::new("axis").required(true).value_parser(axes))
                .args(config_args()),
        )
        .subcommand(Command::new("verify").about("Run the property suite").args(config_args()))
        .subcommand(
            Command::new("cka")
                .about("CKA between two feature dumps")
                .arg(Arg::new("a").required(true).value_parser(value_parser!(PathBuf)))
                .arg(Arg::new("b").required(true).value_parser(value_parser!(PathBuf)))
                .args(config_args()),
        )
        .subcommand(Command::new("eval").about("Evaluate a checkpoint on the validation split").args(config_args()))
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, Failure> {
    let flags: Vec<(&str, &str)> = KEYS
        .iter()
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (*k, v.as_str())))
        .collect();
    let env_seed = std::env::var("LIX_SEED").ok();
    RunConfig::resolve(m.get_one::<PathBuf>("config").map(PathBuf::as_path), env_seed.as_deref(), flags)
}

fn run(m: &ArgMatches) -> Result<(), Failure> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = resolve(sub)?;
    match name {
        "gen-data" => commands::gen_data(&cfg).map(drop),
        "train" => commands::train(&cfg).map(drop),
        "ablate" => {
            let axis: Axis = sub.get_one::<String>("axis").expect("required").parse()?;
            commands::ablate(&cfg, axis).map(drop)
        }
        "verify" => commands::verify(&cfg).map(drop),
        "cka" => {
            let a = sub.get_one::<PathBuf>("a").expect("required");
            let b = sub.get_one::<PathBuf>("b").expect("required");
            commands::cka_files(&cfg, a, b).map(drop)
        }
        "eval" => commands::eval(&cfg).map(drop),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli().get_matches()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
