//! End-to-end exercises of the compiled binary: exit codes, artifacts, and
//! byte-level reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_vital");

/// Small enough that a full synth -> train -> eval round trip takes seconds.
const TINY_CONFIG: &str = r#"{
  "data": { "synthetic": { "patients": 80, "vitals": 4, "labs": 6, "t_max": 16, "min_len": 8, "seed": 7 } },
  "model": {
    "backbone": { "layers": 1, "heads": 2, "dim": 16, "ff_dim": 32, "vocab_size": 32, "max_positions": 16, "pretrain_steps": 0 },
    "vital_heads": 2, "vital_head_dim": 4, "prototypes": 8, "state_dim": 6, "mixer_blocks": 1
  },
  "train": { "epochs": 1, "batch_size": 16 },
  "seed": 5
}"#;

fn vital(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(&path, TINY_CONFIG).unwrap();
    path.to_string_lossy().into_owned()
}

fn run_dir(root: &Path) -> std::path::PathBuf {
    let mut dirs: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.retain(|p| p.is_dir());
    assert_eq!(dirs.len(), 1, "expected exactly one run directory under {}", root.display());
    dirs.pop().unwrap()
}

#[test]
fn synth_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let root = tmp.path().join("runs");
    let root_s = root.to_string_lossy().into_owned();

    assert_ok(&vital(&["synth", "--config", &cfg, "--output", &root_s]), "synth");
    assert_ok(&vital(&["train", "--config", &cfg, "--output", &root_s]), "train");
    let eval = vital(&["eval", "--config", &cfg, "--output", &root_s]);
    assert_ok(&eval, "eval");
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("AUROC") && stdout.contains("AUPRC"), "got: {stdout}");

    let dir = run_dir(&root);
    for artifact in [
        "config.json",
        "manifest.json",
        "dataset.jsonl",
        "checkpoint.bin",
        "history.csv",
        "outcome.json",
        "metrics.json",
        "eval_test.json",
    ] {
        assert!(dir.join(artifact).exists(), "missing {artifact}");
    }
}

#[test]
fn eval_without_a_checkpoint_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let root = tmp.path().join("runs").to_string_lossy().into_owned();
    let out = vital(&["eval", "--config", &cfg, "--output", &root]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("checkpoint"), "got: {stderr}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("config.json");
    fs::write(&path, r#"{ "sede": 3 }"#).unwrap();
    let root = tmp.path().join("runs").to_string_lossy().into_owned();
    let out = vital(&["synth", "--config", &path.to_string_lossy(), "--output", &root]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown field"), "got: {stderr}");
}

#[test]
fn artifacts_are_not_overwritten_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let root = tmp.path().join("runs").to_string_lossy().into_owned();
    assert_ok(&vital(&["synth", "--config", &cfg, "--output", &root]), "first synth");
    let second = vital(&["synth", "--config", &cfg, "--output", &root]);
    assert_eq!(second.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&second.stderr).contains("--force"));
    assert_ok(&vital(&["synth", "--config", &cfg, "--output", &root, "--force"]), "forced synth");
}

#[test]
fn training_reports_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let root = tmp.path().join(name);
        let root_s = root.to_string_lossy().into_owned();
        assert_ok(&vital(&["train", "--config", &cfg, "--output", &root_s]), "train");
        bytes.push(fs::read(run_dir(&root).join("metrics.json")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn seed_flag_changes_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let root = tmp.path().join("runs");
    let root_s = root.to_string_lossy().into_owned();
    assert_ok(&vital(&["synth", "--config", &cfg, "--output", &root_s]), "seed 5");
    assert_ok(&vital(&["synth", "--config", &cfg, "--output", &root_s, "--seed", "9"]), "seed 9");
    let dirs: Vec<_> = fs::read_dir(&root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 2);
}
