use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cubescore::config::SNAPSHOT_FILE;

mod common;
use common::{cli_in, cli_pipeline, hashes};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cubescore")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dirs_under(root: &Path) -> Vec<PathBuf> {
    fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect()
}

const SMALL: [&str; 4] = ["--set", "dataset.input_size=16", "--set", "dataset.n=90"];

#[test]
fn same_seed_reproduces_every_output() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cli_pipeline(a.path(), "4").unwrap();
    cli_pipeline(b.path(), "4").unwrap();
    let ha = hashes(a.path());
    assert!(ha.keys().any(|p| p.ends_with("model.ckpt")) && ha.keys().any(|p| p.ends_with("errors.png")));
    assert_eq!(ha, hashes(b.path()));
    for d in dirs_under(a.path()) {
        let snap = fs::read_to_string(d.join(SNAPSHOT_FILE)).unwrap_or_else(|_| panic!("no snapshot in {d:?}"));
        assert!(snap.contains(env!("CARGO_PKG_VERSION")));
    }
    assert!(a.path().join("train/timing.json").exists());

    let c = tempfile::tempdir().unwrap();
    cli_in(c.path(), &["generate", "--n", "90", "--input-size", "16", "--seed", "5", "--out", "data"]).unwrap();
    let (da, dc) = (hashes(&a.path().join("data")), hashes(&c.path().join("data")));
    assert!(da.iter().filter(|(k, v)| k.starts_with("tensors") && dc.get(*k) != Some(*v)).count() > 0);
}

#[test]
fn bad_arguments_exit_with_usage_error() {
    assert_eq!(run(&["train", "--epochs", "many"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["analyze", "regression"]).status.code(), Some(2));
    assert_eq!(run(&["grid", "--profile", "huge"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["analyze", "ols", "--records", s(&dir.path().join("missing.csv")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["error"]["command"], "analyze");
    assert!(report["error"]["kind"].is_string() && report["error"]["message"].is_string());

    let bad = run(&["generate", "--set", "dataset.n=\"lots\"", "--out", s(dir.path())]);
    assert_eq!(bad.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&bad.stderr).unwrap();
    assert_eq!(report["error"]["kind"], "config");
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let text = ok(&["grid", "--dry-run", "--out", s(&out), "--archs", "baseline-mini", "--seeds", "2"]);
    assert!(!out.exists());
    assert!(text.contains("cells: 24 (0 already recorded, 24 to train)"), "{text}");
    assert!(text.contains("[grid]") || text.contains("epoch_arms"));
    let text = ok(&["train", "--dry-run", "--out", s(&out), "--epochs", "3"]);
    assert!(!out.exists());
    assert!(text.contains("epochs = 3"));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("cfg.toml");
    fs::write(&file, "[train]\nepochs = 7\nbatch_size = 8\n").unwrap();
    let text = ok(&["train", "--dry-run", "--config", s(&file), "--epochs", "9"]);
    assert!(text.contains("epochs = 9") && text.contains("batch_size = 8"), "{text}");
}

#[test]
fn grid_writes_one_record_per_cell_and_analyzes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid");
    let mut args = vec!["grid", "--out", s(&out), "--archs", "baseline-mini,deep-mini", "--seeds", "2", "--seed", "3"];
    args.extend(SMALL);
    args.extend(["--set", "grid.input_size=16", "--set", "grid.epoch_arms=[1, 2]"]);
    ok(&args);
    let lines = fs::read_to_string(out.join("records.jsonl")).unwrap();
    // 2 archs x 2 label sources x 2 epoch arms x 3 augmentation arms x 2 seeds
    assert_eq!(lines.lines().count(), 48);
    let csv = fs::read_to_string(out.join("records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 49);
    assert!(out.join("timings.csv").exists() && out.join(SNAPSHOT_FILE).exists());

    // rerun finds everything done
    let text = ok(&[&args[..], &["--dry-run"]].concat());
    assert!(text.contains("48 already recorded, 0 to train"), "{text}");

    let ols = dir.path().join("ols");
    ok(&["analyze", "ols", "--records", s(&out.join("records.csv")), "--out", s(&ols)]);
    let report = fs::read_to_string(ols.join("ols.txt")).unwrap();
    for reference in ["interviewer", "none", "1"] {
        assert!(report.contains(reference), "reference {reference} missing:\n{report}");
    }
    for f in ["coefficients.csv", "coefficients.svg", "model_comparison.svg", SNAPSHOT_FILE] {
        assert!(ols.join(f).exists(), "{f}");
    }
}
