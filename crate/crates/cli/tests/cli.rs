//! The binary's contract: outputs, exit codes and structured errors.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_structpose"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let o = run(args, cwd);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

/// The last stderr line is a JSON error record.
fn error_category(o: &Output) -> String {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().rev().find(|l| l.starts_with('{')).expect("JSON error line");
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["level"], "ERROR");
    v["category"].as_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["train", "--bogus"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_category(&o), "usage");
    let o = run(&["eval", "--data", "x", "--out", "y", "--protocol", "3", "--model", "m"], d.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_fail_before_creating_outputs() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data", "nowhere", "--out", "run"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("run").exists());
    let o = run(&["train", "--config", "missing.cfg", "--data", ".", "--out", "run"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("run").exists());
}

#[test]
fn invalid_config_values_are_config_errors() {
    let d = tempfile::tempdir().unwrap();
    ok(&["synth", "--n", "2", "--out", "data"], d.path());
    let o = run(&["train", "--data", "data", "--set", "input_size=30", "--out", "run"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_category(&o), "config");
    let o = run(&["train", "--data", "data", "--set", "no_such_key=1", "--out", "run"], d.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_predictions_exit_1() {
    let d = tempfile::tempdir().unwrap();
    ok(&["synth", "--n", "3", "--out", "data"], d.path());
    std::fs::write(d.path().join("preds.jsonl"), "{\"coords\": [[1, 2]]}\n").unwrap();
    let o = run(&["eval", "--data", "data", "--predictions", "preds.jsonl", "--out", "ev"], d.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pose_pipeline_writes_reports_plots_and_manifests() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["synth", "--n", "16", "--seed", "1", "--out", "train"], p);
    ok(&["synth", "--n", "8", "--seed", "1", "--first-index", "100", "--out", "test"], p);
    ok(&["train", "--data", "train", "--epochs", "1", "--set", "input_size=32", "--set", "width=8", "--set", "disc_width=8", "--out", "run"], p);
    for f in ["model.spck", "checkpoint.spck", "history.csv", "config.txt", "manifest.json"] {
        assert!(p.join("run").join(f).is_file(), "missing {f}");
    }
    ok(&["eval", "--data", "test", "--model", "run/model.spck", "--out", "ev"], p);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["task"], "pose2d");
    let pck = report["report"]["pck"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pck));

    // Scoring the written predictions reproduces the model's report.
    ok(&["eval", "--data", "test", "--predictions", "ev/predictions.jsonl", "--out", "ev2"], p);
    let again: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("ev2/report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["pck"], again["report"]["pck"]);

    ok(&["plot", "--csv", "ev/curve.csv", "--label", "model", "--title", "PCK", "--out", "pck.svg"], p);
    let svg = std::fs::read_to_string(p.join("pck.svg")).unwrap();
    assert!(svg.contains("<polyline") && svg.contains("model"));
    ok(&["plot", "--csv", "ev/curve.csv", "--out", "pck.png"], p);
    assert!(std::fs::read(p.join("pck.png")).unwrap().starts_with(b"\x89PNG"));
    let o = run(&["plot", "--csv", "ev/curve.csv", "--out", "pck.gif"], p);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn lifting_pipeline_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["synth", "--kind", "pairs", "--n", "64", "--seed", "2", "--out", "pairs"], p);
    ok(&["synth", "--kind", "pairs", "--n", "16", "--seed", "2", "--first-index", "1000", "--out", "pairs_test"], p);
    ok(&["train", "--task", "lift3d", "--data", "pairs", "--epochs", "2", "--set", "lifter_width=16", "--set", "disc3d_width=16", "--out", "lift"], p);
    assert!(p.join("lift/lifter.spck").is_file());
    ok(&["eval", "--data", "pairs_test", "--model", "lift/lifter.spck", "--protocol", "2", "--out", "ev"], p);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("ev/report.json")).unwrap()).unwrap();
    assert!(report.to_string().contains("protocol2"));
    assert!(!report.to_string().contains("protocol1"));
    ok(&["lift", "--model", "lift/lifter.spck", "--input", "pairs_test", "--out", "lifted"], p);
    let lines = std::fs::read_to_string(p.join("lifted/predictions3d.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 16);
    // Lifting output scored as predictions matches the model evaluation.
    ok(&["eval", "--data", "pairs_test", "--predictions", "lifted/predictions3d.jsonl", "--protocol", "2", "--out", "ev2"], p);
    let again: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("ev2/report.json")).unwrap()).unwrap();
    assert_eq!(report["report"], again["report"]);
}
