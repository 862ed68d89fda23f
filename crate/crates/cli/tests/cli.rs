use std::path::Path;
use std::process::{Command, Output};

fn synergraph(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synergraph"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn synth_train_evaluate_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let o = synergraph(
        &[
            "synth",
            "--out",
            "toy",
            "--users",
            "60",
            "--items",
            "40",
            "--edges-per-user",
            "6",
            "--d-visual",
            "8",
            "--d-textual",
            "8",
        ],
        root,
    );
    assert_ok(&o);
    for f in ["interactions.tsv", "image_feat.sgfm", "text_feat.sgfm"] {
        assert!(root.join("toy").join(f).is_file(), "{f} missing");
    }

    let o = synergraph(
        &[
            "train",
            "--dataset",
            "toy",
            "--epochs",
            "2",
            "--top-k",
            "5",
            "--out",
            "runs",
        ],
        root,
    );
    assert_ok(&o);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let run_a = summary["run_dir"].as_str().unwrap().to_string();
    let dir = root.join(&run_a);
    for f in [
        "config.resolved.json",
        "model.sgck",
        "history.jsonl",
        "report.json",
        "report_val.json",
        "per_user.csv",
    ] {
        assert!(dir.join(f).is_file(), "{f} missing from {}", dir.display());
    }
    let history = std::fs::read_to_string(dir.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let o = synergraph(&["evaluate", &run_a], root);
    assert_ok(&o);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["recall"], summary["test"]["recall"]);

    let o = synergraph(
        &[
            "baseline",
            "--model",
            "bprmf",
            "--dataset",
            "toy",
            "--epochs",
            "2",
            "--out",
            "runs",
        ],
        root,
    );
    assert_ok(&o);
    let run_b: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let run_b = run_b["run_dir"].as_str().unwrap().to_string();
    assert_ne!(run_a, run_b);

    let o = synergraph(&["compare", &run_a, &run_b, "--n-boot", "200"], root);
    assert_ok(&o);
    let cmp: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let p = cmp["p_recall"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);
}

#[test]
fn itemknn_baseline_on_synthetic_data() {
    let tmp = tempfile::tempdir().unwrap();
    let o = synergraph(
        &[
            "baseline",
            "--model",
            "itemknn",
            "--dataset",
            "synthetic",
            "--out",
            "runs",
        ],
        tmp.path(),
    );
    assert_ok(&o);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["model"], "itemknn");
    assert!(v["test"]["recall"].as_f64().unwrap() > 0.0);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = synergraph(&["gradcheck"], tmp.path());
    assert_ok(&o);
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--ablation", "bogus"][..],
        &["frobnicate"],
        &["evaluate", "x", "--phase", "train"],
    ] {
        let o = synergraph(args, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn unknown_config_key_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"dataset": "synthetic", "learning_rate": 0.1}"#).unwrap();
    let o = synergraph(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn export_vocab_writes_both_vocabularies() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&synergraph(
        &[
            "synth",
            "--out",
            "toy",
            "--users",
            "20",
            "--items",
            "15",
            "--edges-per-user",
            "4",
        ],
        tmp.path(),
    ));
    let o = synergraph(&["export-vocab", "--dataset", "toy", "--out", "vocab"], tmp.path());
    assert_ok(&o);
    let items = std::fs::read_to_string(tmp.path().join("vocab/item_vocab.tsv")).unwrap();
    let users = std::fs::read_to_string(tmp.path().join("vocab/user_vocab.tsv")).unwrap();
    assert!(items.lines().count() >= 15);
    assert!(users.lines().count() >= 20);
}
