//! End-to-end runs of the `primekit` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "data.image_size=32",
    "--set", "data.min_scale=3",
    "--set", "data.max_scale=6",
    "--set", "data.train=12",
    "--set", "data.test=6",
    "--set", "base.epochs=1",
    "--set", "prime.epochs=1",
    "--set", "train.batch_size=4",
];

fn primekit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_primekit"))
        .args(args)
        .args(SMALL)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) {
    let o = primekit(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates data and trains a detector into `dir`, returning (data, base).
fn prepare(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    let run = dir.join("run");
    ok(&data, &["gen-data", "--seed", "3"]);
    ok(&run, &["train-base", "--data", s(&data), "--seed", "3"]);
    (data, run.join("base.prk"))
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let (data, base) = prepare(dir.path());
    let run = dir.path().join("run");
    assert_eq!(read(data.join("index.csv")).lines().count(), 1 + 12 + 6);
    assert!(read(run.join("base_loss.csv")).starts_with("epoch,loss\n1,"));
    ok(&run, &["train-priming", "--data", s(&data), "--base", s(&base), "--mask", "1100"]);
    let manifest = read(run.join("priming.manifest"));
    assert!(manifest.contains("mask = 1100\n"), "{manifest}");
    assert!(manifest.contains("task = detection\n"));
    let pw = run.join("priming.prk");
    ok(&run, &["eval", "--data", s(&data), "--base", s(&base), "--priming", s(&pw)]);
    let eval = read(run.join("eval.csv"));
    let names: Vec<&str> = eval.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(eval.lines().next(), Some("strategy,map"));
    assert_eq!(names, ["free", "prune", "prime", "prime-raw"]);
    ok(&run, &["ablate", "--data", s(&data), "--base", s(&base), "--masks", "0000,0001"]);
    let ablation = read(run.join("ablation.csv"));
    assert_eq!(ablation.lines().count(), 3);
    assert!(read(run.join("ablation.svg")).starts_with("<svg"));
    ok(&run, &["sweep-noise", "--data", s(&data), "--base", s(&base), "--priming", s(&pw), "--sigmas", "0,50"]);
    assert_eq!(read(run.join("sweep.csv")).lines().count(), 1 + 2 * 4);
    assert!(read(run.join("sweep.svg")).starts_with("<svg"));
}

#[test]
fn zero_rate_priming_scores_like_the_baselines_and_sweep_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (data, base) = prepare(dir.path());
    let run = dir.path().join("run");
    ok(&run, &["train-priming", "--data", s(&data), "--base", s(&base), "--set", "prime.lr=0"]);
    let pw = run.join("priming.prk");
    ok(&run, &["eval", "--data", s(&data), "--base", s(&base), "--priming", s(&pw)]);
    let eval = read(run.join("eval.csv"));
    let metric = |name: &str| -> String {
        eval.lines()
            .find_map(|l| l.strip_prefix(&format!("{name},")))
            .unwrap()
            .to_string()
    };
    assert_eq!(metric("prime"), metric("prune"));
    assert_eq!(metric("prime-raw"), metric("free"));
    ok(&run, &["sweep-noise", "--data", s(&data), "--base", s(&base), "--priming", s(&pw), "--sigmas", "0"]);
    let sweep = read(run.join("sweep.csv"));
    let from_sweep: Vec<String> = sweep.lines().skip(1).map(|l| l.splitn(2, ',').nth(1).unwrap().to_string()).collect();
    let from_eval: Vec<String> = eval.lines().skip(1).map(String::from).collect();
    assert_eq!(from_sweep, from_eval);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let (data, base) = prepare(dir);
        let run = dir.join("run");
        ok(&run, &["train-priming", "--data", s(&data), "--base", s(&base)]);
        ok(&run, &["eval", "--data", s(&data), "--base", s(&base), "--priming", s(&run.join("priming.prk"))]);
    }
    for f in ["base_loss.csv", "priming_loss.csv", "eval.csv", "base.prk", "priming.prk"] {
        let x = std::fs::read(a.path().join("run").join(f)).unwrap();
        let y = std::fs::read(b.path().join("run").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn errors_carry_a_code_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = primekit(dir.path(), &["train-base", "--data", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error: missing-file: "), "{err}");

    let o = primekit(dir.path(), &["gen-data", "--set", "data.colour=red"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: schema: "));

    let o = primekit(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: usage: "));

    let o = primekit(dir.path(), &["gen-data", "--jobs", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: usage: "));
}

#[test]
fn mismatched_priming_and_base_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (data, base) = prepare(dir.path());
    let seg = dir.path().join("seg");
    ok(&seg, &["train-base", "--data", s(&data), "--set", "task=segmentation"]);
    ok(&seg, &["train-priming", "--data", s(&data), "--base", s(&seg.join("base.prk"))]);
    let o = primekit(dir.path(), &["eval", "--data", s(&data), "--base", s(&base), "--priming", s(&seg.join("priming.prk"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: task-mismatch: "));
    let o = primekit(dir.path(), &["eval", "--data", s(&data), "--base", s(&base), "--strategies", "prune1"]);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: task-mismatch: "));
}
