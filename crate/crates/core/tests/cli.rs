//! The `afrec` binary: exit codes and the pretrain, train, eval, explain path.

use std::path::Path;
use std::process::{Command, Output};

fn afrec(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afrec")).args(args).current_dir(cwd).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&afrec(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&afrec(&["train", "--data", "x"], dir.path())), 1);
    assert_eq!(code(&afrec(&["train", "--data", "x", "--out", "y", "--variant", "bogus"], dir.path())), 1);
    assert_eq!(code(&afrec(&["--help"], dir.path())), 0);
    // Rejected by configuration validation rather than by the parser.
    assert_eq!(code(&afrec(&["data", "synth", "--out", "d", "--n-tops", "3"], dir.path())), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&afrec(&["data", "validate", "missing.json"], dir.path())), 2);
    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    assert_eq!(code(&afrec(&["data", "validate", "broken.json"], dir.path())), 2);
}

#[test]
fn pretrain_train_eval_explain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let out = afrec(args, d);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["data", "synth", "--out", "data", "--n-tops", "30", "--n-bottoms", "110", "--seed", "3"]);
    let summary: serde_json::Value = serde_json::from_slice(&ok(&["data", "validate", "data/manifest.json"]).stdout).unwrap();
    assert_eq!(summary["items"], 140);
    assert_eq!(summary["image_size"], 64);

    let report = ok(&["pretrain-sae", "--data", "data/manifest.json", "--out", "sae.ckpt", "--epochs", "1"]);
    let report: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert_eq!(report["attributes"].as_array().unwrap().len(), 4);

    ok(&["train", "--data", "data/manifest.json", "--init", "sae.ckpt", "--out", "m.ckpt", "--epochs", "1", "--variant", "attr-avg", "--log", "log.jsonl"]);
    let log = std::fs::read_to_string(d.join("log.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!((line["phase"].as_str(), line["epoch"].as_u64()), (Some("joint"), Some(1)));
    assert!(line["val_auc"].is_f64());

    let eval: serde_json::Value =
        serde_json::from_slice(&ok(&["eval", "--ckpt", "m.ckpt", "--data", "data/manifest.json", "--seed", "2"]).stdout).unwrap();
    let keys: Vec<&String> = eval.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["auc", "hr@10", "hr@20", "hr@40", "hr@5", "n_cases", "seed"]);
    assert_eq!(eval["seed"], 2);

    let explain = ["explain", "--ckpt", "m.ckpt", "--top", "data/images/t0000.png", "--bottom", "data/images/b0000.png"];
    let mut args = explain.to_vec();
    args.extend(["--top-cat", "tee", "--bottom-cat", "skirt", "--out", "ex"]);
    ok(&args);
    for f in ["explanation.json", "heatmap.png", "heatmap.csv"] {
        assert!(d.join("ex").join(f).exists(), "{f}");
    }
    let e: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ex/explanation.json")).unwrap()).unwrap();
    // The averaged-attribute variant collapses the matrix to one cell.
    assert_eq!(e["row_names"], serde_json::json!(["mean"]));

    // Unknown category and mismatched data are model errors.
    let mut bad = explain.to_vec();
    bad.extend(["--top-cat", "hat", "--bottom-cat", "skirt", "--out", "ex2"]);
    assert_eq!(code(&afrec(&bad, d)), 3);
    ok(&["data", "synth", "--out", "small", "--n-tops", "10", "--n-bottoms", "10", "--image-size", "32"]);
    assert_eq!(code(&afrec(&["eval", "--ckpt", "m.ckpt", "--data", "small/manifest.json"], d)), 3);
    assert_eq!(code(&afrec(&["eval", "--ckpt", "absent.ckpt", "--data", "data/manifest.json"], d)), 3);
    // Too few bottoms for the ranking protocol is a data error.
    assert_eq!(code(&afrec(&["eval", "--ckpt", "m.ckpt", "--data", "data/manifest.json", "--negatives", "500"], d)), 2);
}
