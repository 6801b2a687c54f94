//! End-to-end tests of the `bnkit` binary: exit codes, file outputs, the
//! trials-CSV cross-check mode, and byte-level determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bnkit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bnkit"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn small_config(seed: u64, variant: &str, epochs: usize, lr: f64) -> String {
    format!(
        r#"{{
  "seed": {seed},
  "model": {{ "arch": "mlp", "hidden": [16, 16], "norm": {{ "variant": "{variant}" }} }},
  "dataset": {{ "kind": "blobs", "train": 96, "test": 128, "classes": 3, "spread": 0.3 }},
  "sgd": {{ "learning_rate": {lr}, "batch_size": 12, "epochs": {epochs} }},
  "sweep": {{ "etas": [0.05, 0.2], "repeats": 4 }}
}}"#
    )
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", "{ not json");
    let out = bnkit()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let cfg = write_config(
        dir.path(),
        "badlr.json",
        &small_config(1, "l2", 1, 0.0),
    );
    let out = bnkit()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // one step of this size makes the hidden weights ~1e154; the next
    // matmul of two such factors overflows f64 and the loss goes non-finite
    let cfg = write_config(
        dir.path(),
        "diverge.json",
        &small_config(1, "l2", 30, 1e155),
    );
    let out = bnkit()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn zero_epochs_writes_initialized_model_and_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg0 = write_config(dir.path(), "e0.json", &small_config(5, "l1", 0, 0.1));
    let out_a = dir.path().join("a");
    run_ok(bnkit().args(["train", "--config"]).arg(&cfg0).arg("--out").arg(&out_a));
    let log = fs::read_to_string(out_a.join("train_log.csv")).unwrap();
    assert_eq!(log, "epoch,loss,accuracy\n");

    // a second zero-epoch run reproduces the same initialization bytes
    let out_b = dir.path().join("b");
    run_ok(bnkit().args(["train", "--config"]).arg(&cfg0).arg("--out").arg(&out_b));
    assert_eq!(
        fs::read(out_a.join("model.bin")).unwrap(),
        fs::read(out_b.join("model.bin")).unwrap()
    );
}

#[test]
fn train_then_sweep_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &small_config(7, "l1", 10, 0.1));
    let out = dir.path().join("run");
    run_ok(bnkit().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out));
    let stdout = run_ok(bnkit().args(["sweep", "--config"]).arg(&cfg).arg("--out").arg(&out));
    let text = String::from_utf8_lossy(&stdout.stdout).to_string();
    assert!(text.contains("A_avr ="), "{text}");
    for file in ["model.bin", "train_log.csv", "trials.csv", "summary.csv", "sweep.json"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert!(json["baseline"].as_f64().unwrap() > 0.0);
    assert!(json["layers"].as_array().unwrap().len() >= 3);
}

#[test]
fn sweep_with_only_eta_zero_reports_unit_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let body = small_config(7, "l2", 5, 0.1).replace("[0.05, 0.2]", "[0.0]");
    let cfg = write_config(dir.path(), "cfg.json", &body);
    let out = dir.path().join("run");
    run_ok(bnkit().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out));
    let stdout = run_ok(bnkit().args(["sweep", "--config"]).arg(&cfg).arg("--out").arg(&out));
    let text = String::from_utf8_lossy(&stdout.stdout).to_string();
    assert!(text.contains("A_avr = n/a"), "{text}");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let row = summary.lines().nth(1).unwrap();
    assert!(row.ends_with(",1"), "normalized must be 1: {row}");
}

#[test]
fn from_trials_cross_check_reproduces_known_mean() {
    let dir = tempfile::tempdir().unwrap();
    // six normalized accuracies as single trials, baseline 1
    let mut trials = String::from("eta,trial,accuracy\n");
    for (eta, acc) in [
        (0.01, 0.9994),
        (0.04, 0.9945),
        (0.08, 0.9670),
        (0.12, 0.9135),
        (0.16, 0.8185),
        (0.20, 0.6855),
    ] {
        trials.push_str(&format!("{eta},0,{acc}\n"));
    }
    let trials_path = dir.path().join("table.csv");
    fs::write(&trials_path, trials).unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &small_config(1, "l1", 1, 0.1));
    let out = dir.path().join("xcheck");
    let stdout = run_ok(
        bnkit()
            .args(["sweep", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .arg("--from-trials")
            .arg(&trials_path),
    );
    let text = String::from_utf8_lossy(&stdout.stdout).to_string();
    assert!(text.contains("A_avr = 0.8964"), "{text}");
}

#[test]
fn compare_rejects_unfair_configs_and_single_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.json", &small_config(3, "l2", 4, 0.1));
    // differs in epochs, not just the norm
    let b = write_config(dir.path(), "b.json", &small_config(3, "l1", 5, 0.1));
    let out = bnkit()
        .args(["compare", "--config"])
        .arg(&a)
        .arg("--config")
        .arg(&b)
        .arg("--out")
        .arg(dir.path().join("cmp"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unfair"));

    let out = bnkit()
        .args(["compare", "--config"])
        .arg(&a)
        .arg("--out")
        .arg(dir.path().join("cmp1"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_identical_configs_gives_identical_columns() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.json", &small_config(3, "l1", 6, 0.1));
    let b = write_config(dir.path(), "b.json", &small_config(3, "l1", 6, 0.1));
    let out_dir = dir.path().join("cmp");
    run_ok(
        bnkit()
            .args(["compare", "--config"])
            .arg(&a)
            .arg("--config")
            .arg(&b)
            .arg("--out")
            .arg(&out_dir),
    );
    let csv = fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3, "{line}");
        assert_eq!(fields[1], fields[2], "columns must match: {line}");
    }
}

#[test]
fn gradnoise_fixture_reports_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let body = small_config(1, "l2", 1, 0.1)
        .replace("\"batch_size\": 12", "\"batch_size\": 1");
    let cfg = write_config(dir.path(), "cfg.json", &body);
    let out = dir.path().join("gn");
    let stdout = run_ok(
        bnkit()
            .args(["gradnoise", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .args(["--fixture", "quadratic"]),
    );
    let text = String::from_utf8_lossy(&stdout.stdout).to_string();
    assert!(text.contains("holds"), "{text}");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("gradnoise.json")).unwrap()).unwrap();
    assert!((json["C_hat"].as_f64().unwrap() - 4.0).abs() < 0.05 * 4.0);
    assert!(json["error_mean_norm"].as_f64().unwrap() < 1e-10);
    assert_eq!(json["alpha"].as_f64().unwrap(), 0.1);
    assert_eq!(json["batch_size"].as_u64().unwrap(), 1);
    assert!((json["empirical_lhs"].as_f64().unwrap() - 0.04).abs() < 1e-12);
    assert!((json["bound_rhs"].as_f64().unwrap() - 0.04).abs() < 1e-12);
}

#[test]
fn gradnoise_on_a_trained_model_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let body = small_config(9, "l1", 6, 0.05).replace(
        "\"sweep\":",
        "\"gradnoise\": { \"trials\": 200, \"samples\": 32 },\n  \"sweep\":",
    );
    let cfg = write_config(dir.path(), "cfg.json", &body);
    let out = dir.path().join("run");
    run_ok(bnkit().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out));
    run_ok(bnkit().args(["gradnoise", "--config"]).arg(&cfg).arg("--out").arg(&out));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("gradnoise.json")).unwrap()).unwrap();
    assert!(json["C_hat"].as_f64().unwrap() > 0.0);
    assert!(json["error_mean_norm"].as_f64().unwrap() < 1e-10);
    assert_eq!(json["trials"].as_u64().unwrap(), 200);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &small_config(7, "l2", 3, 0.1));
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");
    run_ok(bnkit().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out_a));
    run_ok(bnkit().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out_b).args(["--seed", "7"]));
    run_ok(bnkit().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out_c).args(["--seed", "8"]));
    let a = fs::read(out_a.join("model.bin")).unwrap();
    let b = fs::read(out_b.join("model.bin")).unwrap();
    let c = fs::read(out_c.join("model.bin")).unwrap();
    assert_eq!(a, b, "--seed equal to the config seed must not change bytes");
    assert_ne!(a, c, "a different seed must change the trained model");
}
