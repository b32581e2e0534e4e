use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vip")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vip(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_eval_pursue() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "--profile", "planted", "--seed", "3", "--out", p(d), "--train-rows", "600", "--test-rows", "150"]);
    for f in ["train.csv", "test.csv", "model.json", "queries.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(d.join("train.csv")).unwrap();
    assert!(header.starts_with("label,q_planted,q_noise_1"));

    fs::write(
        d.join("config.json"),
        r#"{"epochs_initial": 6, "epochs_biased": 2, "classifier_hidden": [16], "querier_hidden": [16]}"#,
    )
    .unwrap();
    let ckpt = d.join("model.ckpt");
    ok(&["train", "--data", p(&d.join("train.csv")), "--config", p(&d.join("config.json")), "--out", p(&ckpt)]);
    let report = fs::read_to_string(d.join("model.ckpt.report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 8);
    let first: Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    assert!(first["loss"].as_f64().unwrap() > 0.0);

    let eval_out = d.join("eval.json");
    ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&d.join("test.csv")),
        "--oracle",
        p(&d.join("model.json")),
        "--out",
        p(&eval_out),
        "--curve-csv",
        p(&d.join("curve.csv")),
        "--trajectories",
        "50",
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&eval_out).unwrap()).unwrap();
    assert_eq!(report["rows"], 150);
    assert_eq!(report["budget_curve"].as_array().unwrap().len(), 4);
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let agreement = &report["agreement"];
    assert_eq!(agreement["trajectories"], 50);
    assert_eq!(agreement["stop"], "map:0.05");
    let csv = fs::read_to_string(d.join("curve.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "budget,learned,random");
    assert_eq!(csv.lines().count(), 5);

    fs::write(d.join("answers.json"), r#"{"planted": 1, "noise_1": -1, "q_noise_2": "1", "noise_3": -1}"#).unwrap();
    let printed = ok(&["pursue", "--ckpt", p(&ckpt), "--input", p(&d.join("answers.json")), "--stop", "budget:2"]);
    let lines: Vec<&str> = printed.lines().collect();
    assert!(lines[0].starts_with("step"));
    assert!(lines[1].contains("(prior)"));
    assert_eq!(lines.len(), 5, "{printed}");
    assert!(lines[4].starts_with("prediction: "));
}

#[test]
fn exit_codes() {
    let out = vip(&["--version"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(vip(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(vip(&["frobnicate"]).status.code(), Some(1));
    let missing = vip(&["pursue", "--ckpt", "/nonexistent/x.ckpt", "--input", "/nonexistent/a.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error: "));

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "--profile", "planted", "--out", p(d), "--train-rows", "50", "--test-rows", "20"]);
    fs::write(d.join("bad.json"), r#"{"epochs_initial": 1, "lr": -1.0}"#).unwrap();
    let bad = vip(&["train", "--data", p(&d.join("train.csv")), "--config", p(&d.join("bad.json")), "--out", p(&d.join("m.ckpt"))]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!d.join("m.ckpt").exists());
}
