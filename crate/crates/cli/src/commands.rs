//! Subcommand implementations. Each returns what it wrote so that callers
//! (and tests) can inspect results without reparsing files.

use std::fs;
use std::path::{Path, PathBuf};

use lix_core::feature::{cka, gram, recalibrate, AlignedFeatures};
use lix_core::harness::{
    distill_with_views, evaluate, load_dataset, save_dataset, teacher_views, train_teacher, Dataset, LoopLimits,
    Manifest, NetKind, Network, SegMetrics, TeacherView, TrainOutcome,
};
use lix_core::verify::{self, VerifyOptions, VerifyReport};
use lix_core::{Checkpoint, Error, Tensor};

use crate::ablate::{self, Arm, Axis, CellSummary, SweepRun};
use crate::config::{RunConfig, RunMethod};
use crate::exit::Failure;
use crate::output::{epoch_rows, write_csv, write_json, MetricsRow, RunSummary};

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::from(e).context(format!("cannot create {}", dir.display())))
}

pub fn gen_data(cfg: &RunConfig) -> Result<Manifest, Failure> {
    let data = cfg.data.generate()?;
    create_dir(&cfg.data_dir)?;
    let manifest = save_dataset(&cfg.data_dir, &cfg.data, &data).map_err(|e| Failure::from(e).context(cfg.data_dir.display()))?;
    println!(
        "wrote {} train and {} val scenes to {} (sha256 {})",
        manifest.files.train.len(),
        manifest.files.val.len(),
        cfg.data_dir.display(),
        manifest.checksum
    );
    Ok(manifest)
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let manifest = cfg.data_dir.join(lix_core::harness::dataset::MANIFEST);
    if !manifest.is_file() {
        return Err(Failure::missing(format!(
            "no dataset at {} (run `lix gen-data` first)",
            cfg.data_dir.display()
        )));
    }
    let (data, _) = load_dataset(&cfg.data_dir).map_err(|e| Failure::from(e).context(cfg.data_dir.display()))?;
    Ok(data)
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint, Failure> {
    if !path.is_file() {
        return Err(Failure::missing(format!("{what} checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path).map_err(|e| Failure::from(e).context(path.display()))
}

pub fn load_teacher(cfg: &RunConfig, data: &Dataset) -> Result<Network, Failure> {
    let path = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| Failure::missing("this command needs a teacher checkpoint (set `teacher`)"))?;
    let net = Network::from_checkpoint(&load_checkpoint(path, "teacher")?)?;
    if net.kind() != NetKind::Teacher {
        return Err(Failure::usage(format!("{} is not a teacher checkpoint", path.display())));
    }
    if net.classes() != data.classes() {
        return Err(Failure::usage(format!(
            "teacher predicts {} classes but the dataset has {}",
            net.classes(),
            data.classes()
        )));
    }
    Ok(net)
}

fn teacher_outputs(cfg: &RunConfig, data: &Dataset) -> Result<Vec<TeacherView>, Failure> {
    let teacher = load_teacher(cfg, data)?;
    Ok(teacher_views(&teacher, &data.train)?)
}

/// Saves the last good parameters of a diverged run before reporting it.
fn handle_divergence(result: lix_core::Result<TrainOutcome>, out: &Path, run_id: &str) -> Result<TrainOutcome, Failure> {
    match result {
        Err(Error::Diverged { epoch, step, last_good }) => {
            let path = out.join(format!("{run_id}.diverged.lixt"));
            last_good.save(&path)?;
            Err(Failure::failed(format!(
                "{run_id} diverged at epoch {epoch}, step {step}; last good parameters in {}",
                path.display()
            )))
        }
        other => Ok(other?),
    }
}

pub fn train(cfg: &RunConfig) -> Result<RunSummary, Failure> {
    let data = load_data(cfg)?;
    let name = cfg.method.name();
    let run_id = format!("{name}-s{}", cfg.seed);
    let views = match cfg.method {
        RunMethod::Student(m) if m.needs_teacher() => teacher_outputs(cfg, &data)?,
        _ => Vec::new(),
    };
    create_dir(&cfg.out_dir)?;
    let result = match cfg.method {
        RunMethod::Teacher => train_teacher(&data, &cfg.train),
        RunMethod::Student(m) => distill_with_views(&views, &data, &cfg.train, m, LoopLimits::default()),
    };
    let outcome = handle_divergence(result, &cfg.out_dir, &run_id)?;

    let ck_path = cfg.out_dir.join(format!("{run_id}.lixt"));
    let csv_path = cfg.out_dir.join(format!("{run_id}.csv"));
    outcome.checkpoint.save(&ck_path)?;
    write_csv(&csv_path, &epoch_rows(&run_id, name, cfg.seed, &outcome))?;
    let summary = RunSummary {
        run_id: run_id.clone(),
        method: name.into(),
        seed: cfg.seed,
        epochs: outcome.epochs.len(),
        best_epoch: outcome.best_epoch,
        best: outcome.best,
        checkpoint: file_name(&ck_path),
        metrics_csv: file_name(&csv_path),
    };
    write_json(&cfg.out_dir.join(format!("{run_id}.json")), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(summary)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

pub struct AblationOutput {
    pub runs: Vec<SweepRun>,
    pub summary: Vec<CellSummary>,
    pub runs_csv: PathBuf,
    pub summary_csv: PathBuf,
}

pub fn ablate(cfg: &RunConfig, axis: Axis) -> Result<AblationOutput, Failure> {
    let data = load_data(cfg)?;
    let views = teacher_outputs(cfg, &data)?;
    let dir = cfg.out_dir.join(format!("ablate_{axis}"));
    create_dir(&dir)?;
    let seeds: Vec<u64> = (0..cfg.ablate_seeds as u64).map(|i| cfg.seed + i).collect();
    let mut runs = Vec::new();
    let mut best_rows = Vec::new();
    for cell in ablate::cells(axis, &cfg.train) {
        for &seed in &seeds {
            let outcome = ablate::run_cell(&cell, &Arm { seed, data: &data, views: &views })?;
            let run_id = format!("{axis}-{}-s{seed}", cell.label);
            let method = cell.method.name();
            write_csv(&dir.join(format!("{run_id}.csv")), &epoch_rows(&run_id, method, seed, &outcome))?;
            best_rows.push(MetricsRow::new(&run_id, method, seed, &outcome.epochs[outcome.best_epoch]));
            runs.push(SweepRun {
                cell: cell.label.clone(),
                method: cell.method,
                seed,
                outcome,
            });
        }
    }
    let summary = ablate::summarize(axis, &runs);
    let runs_csv = cfg.out_dir.join(format!("ablate_{axis}.csv"));
    let summary_csv = cfg.out_dir.join(format!("ablate_{axis}_summary.csv"));
    write_csv(&runs_csv, &best_rows)?;
    write_csv(&summary_csv, &summary)?;
    for s in &summary {
        println!(
            "{:<18} {:<5} n={}  mIoU {:6.2} ± {:5.2}  mFsc {:6.2} ± {:5.2}",
            s.cell, s.method, s.runs, s.mIoU_mean, s.mIoU_std, s.mFsc_mean, s.mFsc_std
        );
    }
    Ok(AblationOutput {
        runs,
        summary,
        runs_csv,
        summary_csv,
    })
}

pub fn verify(cfg: &RunConfig) -> Result<VerifyReport, Failure> {
    let report = verify::run(&VerifyOptions {
        seed: cfg.verify_seed,
        decomposition_direction: cfg.verify_kl_direction,
    });
    print!("{}", report.table());
    if report.passed() {
        Ok(report)
    } else {
        Err(Failure::failed(format!("failed checks: {}", report.failures().join(", "))))
    }
}

/// The single tensor of a feature dump: the entry named `features`, or the
/// only entry. `C×H×W` maps are flattened to `C×HW`.
pub fn read_features(path: &Path) -> Result<Tensor, Failure> {
    let ck = load_checkpoint(path, "feature")?;
    let t = match (ck.get("features"), ck.len()) {
        (Some(t), _) => t.clone(),
        (None, 1) => ck.iter().next().map(|(_, t)| t.clone()).expect("one entry"),
        _ => {
            return Err(Failure::usage(format!(
                "{}: expected one tensor or a tensor named `features`",
                path.display()
            )))
        }
    };
    match *t.shape() {
        [_, _] => Ok(t),
        [c, h, w] => Ok(t.reshape(&[c, h * w])?),
        _ => Err(Failure::usage(format!("{}: features must be 2-D or 3-D, got {:?}", path.display(), t.shape()))),
    }
}

/// CKA between two feature dumps after the configured recalibration.
pub fn cka_files(cfg: &RunConfig, a: &Path, b: &Path) -> Result<f64, Failure> {
    let (fa, fb) = (read_features(a)?, read_features(b)?);
    if fa.dim(0) != fb.dim(0) {
        return Err(Failure::usage(format!("row counts differ: {} vs {}", fa.dim(0), fb.dim(0))));
    }
    let kernel = cfg.train.feature.kernel;
    let ga = gram(&recalibrate(&AlignedFeatures::new(fa)?, kernel));
    let gb = gram(&recalibrate(&AlignedFeatures::new(fb)?, kernel));
    let value = cka(&ga, &gb, cfg.train.feature.hsic_mode)?;
    println!("{value}");
    Ok(value)
}

pub fn eval(cfg: &RunConfig) -> Result<SegMetrics, Failure> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| Failure::missing("`eval` needs `checkpoint`"))?;
    let net = Network::from_checkpoint(&load_checkpoint(path, "model")?)?;
    let data = load_data(cfg)?;
    if net.classes() != data.classes() {
        return Err(Failure::usage("checkpoint and dataset disagree on the class count"));
    }
    let m = evaluate(&net, &data.val)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(m)
}
