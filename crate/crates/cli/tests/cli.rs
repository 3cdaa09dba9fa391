//! Exit codes, run-directory contents and idempotent re-evaluation.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn curda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curda"))
        .args(args)
        .current_dir(repo_root())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

/// Tiny overrides on the desk config: a few samples, one epoch, two attack steps.
const SMALL: &[&str] = &[
    "--set",
    "data.source_limit=60",
    "--set",
    "data.target_limit=40",
    "--set",
    "source.epochs=1",
    "--set",
    "adapt.epochs=1",
    "--set",
    "source.batch_size=20",
    "--set",
    "adapt.batch_size=20",
    "--set",
    "attack.train.num_steps=2",
    "--set",
    "attack.eval.num_steps=2",
    "--set",
    "attack.label_free.num_steps=2",
];

fn with_small(mut args: Vec<&str>) -> Vec<&str> {
    args.extend_from_slice(SMALL);
    args
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("JSON error line")
}

#[test]
fn unknown_verb_is_a_usage_error() {
    assert_eq!(curda(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(curda(&["run"]).status.code(), Some(2));
}

#[test]
fn bad_configuration_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = curda(&["run", "--config", "configs/does-not-exist.toml", "--out", out]);
    assert_eq!(missing.status.code(), Some(3));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = 3\n").unwrap();
    let r = curda(&["train", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(r.status.code(), Some(3));
    assert_eq!(error_line(&r)["error"]["kind"], "config");

    let r = curda(&[
        "run",
        "--config",
        "configs/curda.toml",
        "--out",
        out,
        "--set",
        "source.epochs=0",
        "--set",
        "data.source_limit=10",
    ]);
    assert_eq!(r.status.code(), Some(3));

    let r = curda(&[
        "adapt",
        "--config",
        "configs/curda.toml",
        "--out",
        out,
        "--set",
        "method=sr",
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn run_then_evaluate_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let r = curda(&with_small(vec!["run", "--config", "configs/curda.toml", "--out", out]));
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in [
        "config.toml",
        "result.json",
        "source_encoder.json",
        "classifier.json",
        "target_encoder.json",
        "metrics-run.jsonl",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let first = std::fs::read_to_string(dir.path().join("result.json")).unwrap();
    let r = curda(&["evaluate", "--out", out]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(first, std::fs::read_to_string(dir.path().join("result.json")).unwrap());

    // a different configuration may not reuse the directory
    let r = curda(&["evaluate", "--out", out, "--seed", "99"]);
    assert_eq!(r.status.code(), Some(3));

    let r = curda(&["export-embeddings", "--out", out, "--layer", "penultimate"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(dir.path().join("embeddings-penultimate.csv")).unwrap();
    assert!(csv
        .lines()
        .next()
        .unwrap()
        .ends_with("domain,variant,true_class,pred_class"));
    let r = curda(&["export-embeddings", "--out", out, "--layer", "logits"]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn separate_stage_verbs_compose() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for verb in ["train", "adapt", "evaluate"] {
        let r = curda(&with_small(vec![verb, "--config", "configs/curda.toml", "--out", out]));
        assert!(r.status.success(), "{verb}: {}", String::from_utf8_lossy(&r.stderr));
    }
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    assert_eq!(result["complete"], true);
    assert_eq!(result["tag"], "CURDA");
}

#[test]
fn sweep_writes_tables_and_arm_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = with_small(vec!["sweep", "--config", "configs/table1.toml", "--out", out]);
    args.extend_from_slice(&["--set", "sweep.arms=[\"sr\",\"sr_uda\"]", "--set", "sweep.seeds=[0]"]);
    let r = curda(&args);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for d in ["sr-seed0", "sr_uda-seed0"] {
        assert!(dir.path().join(d).join("result.json").exists(), "missing {d}");
    }
    let csv = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert!(csv.starts_with("method,"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn environment_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let r = Command::new(env!("CARGO_BIN_EXE_curda"))
        .args(with_small(vec![
            "train",
            "--config",
            "configs/curda.toml",
            "--out",
            out,
        ]))
        .current_dir(repo_root())
        .env("CURDA_MODEL__ENCODER__FEATURE_DIM", "32")
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let snapshot = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(snapshot.contains("feature_dim = 32"));
}
