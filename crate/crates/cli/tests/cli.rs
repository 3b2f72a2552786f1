//! End-to-end behaviour of the `lix` binary on tiny datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lix_cli::output::{read_metrics, RunSummary, METRICS_HEADER};
use lix_core::harness::read_manifest;
use lix_core::{Checkpoint, Rng, Tensor};

const TINY: [(&str, &str); 6] = [
    ("data.train", "4"),
    ("data.val", "2"),
    ("data.height", "32"),
    ("data.width", "32"),
    ("train.epochs", "2"),
    ("train.batch", "2"),
];

fn lix(args: &[&str], extra: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lix"));
    cmd.args(args).env_remove("LIX_SEED").env("RUST_LOG", "warn");
    for (k, v) in extra {
        cmd.arg(format!("--{k}")).arg(v);
    }
    cmd.output().expect("binary runs")
}

fn lix_env(args: &[&str], env: (&str, &str)) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lix"))
        .args(args)
        .env(env.0, env.1)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn tiny_with<'a>(pairs: &[(&'a str, &'a str)]) -> Vec<(&'a str, &'a str)> {
    let mut v: Vec<(&str, &str)> = TINY.to_vec();
    v.extend_from_slice(pairs);
    v
}

fn gen(dir: &Path, seed: &str) -> Output {
    lix(&["gen-data"], &tiny_with(&[("data.dir", path_str(dir)), ("seed", seed)]))
}

#[test]
fn gen_data_is_deterministic_and_seeded() {
    let root = tempfile::tempdir().unwrap();
    let (a, b, c) = (root.path().join("a"), root.path().join("b"), root.path().join("c"));
    assert_eq!(code(&gen(&a, "1")), 0);
    assert_eq!(code(&gen(&b, "1")), 0);
    assert_eq!(code(&gen(&c, "2")), 0);
    let (ma, mb, mc) = (read_manifest(&a).unwrap(), read_manifest(&b).unwrap(), read_manifest(&c).unwrap());
    assert_eq!(ma.checksum, mb.checksum);
    assert_ne!(ma.checksum, mc.checksum);
    assert_eq!(ma.files.train.len(), 4);
    for f in ma.files.all() {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }

    let env = root.path().join("env");
    let o = lix_env(
        &["gen-data", "--data.dir", path_str(&env), "--data.train", "4", "--data.val", "2", "--data.height", "32", "--data.width", "32"],
        ("LIX_SEED", "2"),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_manifest(&env).unwrap().checksum, mc.checksum);
}

#[test]
fn two_hundred_training_scenes_listed() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("d");
    let o = lix(
        &["gen-data"],
        &[("data.dir", path_str(&dir)), ("data.train", "200"), ("data.val", "2"), ("data.height", "32"), ("data.width", "32")],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_manifest(&dir).unwrap().files.train.len(), 200);
}

#[test]
fn unwritable_dataset_path_exits_2() {
    let root = tempfile::tempdir().unwrap();
    let blocker = root.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = gen(&blocker.join("sub"), "0");
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_2() {
    assert_eq!(code(&lix(&["verify", "--no.such.key", "1"], &[])), 2);
    assert_eq!(code(&lix(&["train"], &[("train.momentum", "1.5")])), 2);
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nlogit.kl = teacher\n").unwrap();
    let o = lix(&["verify", "--config", path_str(&cfg)], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("logit.kl"), "{}", stderr(&o));
}

#[test]
fn verify_passes_and_mutation_fails() {
    let o = lix(&["verify"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = String::from_utf8_lossy(&o.stdout);
    let names = table.lines().filter(|l| l.contains(" PASS ")).count();
    assert!(names >= 12, "{table}");

    let bad = lix(&["verify"], &[("verify.kl_direction", "literal")]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("I1.decomposition"), "{}", stderr(&bad));
    let out = String::from_utf8_lossy(&bad.stdout);
    let line = out.lines().find(|l| l.starts_with("I1.decomposition")).expect("I1 row");
    assert!(line.contains("FAIL"), "{line}");
}

struct Workspace {
    _root: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
}

fn workspace() -> Workspace {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let out = root.path().join("out");
    let o = gen(&data, "3");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    Workspace { _root: root, data, out }
}

fn train(ws: &Workspace, out: &Path, method: &str, extra: &[(&str, &str)]) -> Output {
    let mut pairs = tiny_with(&[("data.dir", path_str(&ws.data)), ("out", path_str(out)), ("method", method), ("seed", "3")]);
    pairs.extend_from_slice(extra);
    lix(&["train"], &pairs)
}

#[test]
fn train_outputs_are_consistent_and_idempotent() {
    let ws = workspace();
    let o = train(&ws, &ws.out, "none", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = ws.out.join("none-s3.csv");
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    let rows = read_metrics(&csv).unwrap();
    assert_eq!(rows.len(), 2);
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(ws.out.join("none-s3.json")).unwrap()).unwrap();
    let best = rows.iter().map(|r| r.mIoU).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(summary.best.mIoU, best);
    assert_eq!(rows[summary.best_epoch].mIoU, best);

    let again = ws.out.with_file_name("again");
    assert_eq!(code(&train(&ws, &again, "none", &[])), 0);
    for f in ["none-s3.csv", "none-s3.json", "none-s3.lixt"] {
        assert_eq!(fs::read(ws.out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn distillation_needs_a_teacher() {
    let ws = workspace();
    let o = train(&ws, &ws.out, "lix", &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let missing = ws.out.join("nope.lixt");
    let o = train(&ws, &ws.out, "kd", &[("teacher", path_str(&missing))]);
    assert_eq!(code(&o), 3);

    let o = train(&ws, &ws.out, "teacher", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let teacher = ws.out.join("teacher-s3.lixt");
    let o = train(&ws, &ws.out, "lix", &[("teacher", path_str(&teacher))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let student = Checkpoint::load(ws.out.join("lix-s3.lixt")).unwrap();
    assert!(student.get("dwc.layer0.w").is_some());
    assert!(student.get("arfd.pair1.teacher.conv.w").is_some());

    let student_path = ws.out.join("none-as-teacher.lixt");
    assert_eq!(code(&train(&ws, &ws.out, "none", &[])), 0);
    fs::copy(ws.out.join("none-s3.lixt"), &student_path).unwrap();
    assert_eq!(code(&train(&ws, &ws.out, "kd", &[("teacher", path_str(&student_path))])), 2);

    let o = lix(&["eval"], &[("data.dir", path_str(&ws.data)), ("checkpoint", path_str(&teacher))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(m["mIoU"].as_f64().unwrap() >= 0.0);
    assert_eq!(code(&lix(&["eval"], &[("data.dir", path_str(&ws.data))])), 3);
    assert_eq!(code(&lix(&["eval"], &[("data.dir", path_str(&ws.out)), ("checkpoint", path_str(&teacher))])), 3);
}

#[test]
fn beta_and_ratio_sweeps_have_contracted_rows() {
    let ws = workspace();
    assert_eq!(code(&train(&ws, &ws.out, "teacher", &[])), 0);
    let teacher = ws.out.join("teacher-s3.lixt");
    let common = tiny_with(&[
        ("data.dir", path_str(&ws.data)),
        ("out", path_str(&ws.out)),
        ("teacher", path_str(&teacher)),
        ("train.epochs", "1"),
    ]);
    let common: Vec<_> = common.into_iter().filter(|(k, v)| *k != "train.epochs" || *v == "1").collect();
    assert_eq!(common.iter().filter(|(k, _)| *k == "train.epochs").count(), 1);

    let o = lix(&["ablate", "beta"], &common);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_metrics(&ws.out.join("ablate_beta.csv")).unwrap();
    assert_eq!(rows.len(), 15);
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods.iter().filter(|m| **m == "dkd").count(), 12);
    assert_eq!(methods.iter().filter(|m| **m == "dwld").count(), 3);
    let summary = fs::read_to_string(ws.out.join("ablate_beta_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    assert!(summary.lines().next().unwrap().contains("mIoU_mean,mIoU_std"));

    let o = lix(&["ablate", "ratio"], &common);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cells: Vec<String> = fs::read_to_string(ws.out.join("ablate_ratio_summary.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .collect();
    assert_eq!(cells, ["1:1:1", "1:2:1", "1:1:2", "2:1:1"]);

    assert_eq!(code(&lix(&["ablate", "gamma"], &common)), 2);
    let no_teacher: Vec<_> = common.iter().copied().filter(|(k, _)| *k != "teacher").collect();
    assert_eq!(code(&lix(&["ablate", "omega"], &no_teacher)), 3);
}

/// Linear CKA over rows, written out with centering matrices.
fn linear_cka(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.dim(0);
    let h = Tensor::from_fn(&[n, n], |i| f64::from(u8::from(i / n == i % n)) - 1.0 / n as f64);
    let k = x.matmul(&x.transpose().unwrap()).unwrap();
    let l = y.matmul(&y.transpose().unwrap()).unwrap();
    let hsic = |a: &Tensor, b: &Tensor| {
        let m = a.matmul(&h).unwrap().matmul(b).unwrap().matmul(&h).unwrap();
        (0..n).map(|i| m.at2(i, i)).sum::<f64>()
    };
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

#[test]
fn cka_subcommand_matches_an_oracle() {
    let root = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(4, 0);
    let x = rng.uniform_tensor(&[6, 3, 5], -1.0, 1.0);
    let y = rng.uniform_tensor(&[6, 10], -1.0, 1.0);
    let (px, py) = (root.path().join("x.lixt"), root.path().join("y.lixt"));
    let mut ck = Checkpoint::new();
    ck.insert("features", x.clone());
    ck.save(&px).unwrap();
    let mut ck = Checkpoint::new();
    ck.insert("tap", y.clone());
    ck.save(&py).unwrap();

    let o = lix(&["cka", path_str(&px), path_str(&py)], &[("feature.kernel", "none")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let got: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    let want = linear_cka(&x.reshape(&[6, 15]).unwrap(), &y);
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");

    let o = lix(&["cka", path_str(&px), path_str(&px)], &[]);
    let same: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!((same - 1.0).abs() < 1e-10);
    assert_eq!(code(&lix(&["cka", path_str(&px), "/nonexistent.lixt"], &[])), 3);
}
