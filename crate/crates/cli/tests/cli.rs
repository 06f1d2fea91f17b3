//! End-to-end tests for the command-line interface, driven through the
//! compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clip-ping"))
}

fn tiny_config() -> &'static str {
    r#"{
  "classes": 4,
  "n_train": 64,
  "n_val": 16,
  "n_test": 16,
  "latent_dim": 6,
  "raw_dim_image": 12,
  "raw_dim_text": 10,
  "data_seed": 900,
  "teacher_dim_image": 9,
  "teacher_dim_text": 7,
  "method": "clip-ping",
  "epochs": 2,
  "warmup_epochs": 1,
  "batch_size": 16,
  "capacity": 32,
  "proj_dim": 8,
  "hidden_dim": 12,
  "seed": 5,
  "probe_epochs": 3,
  "probe_batch_size": 32
}
"#
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(&path, tiny_config()).unwrap();
    path
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn extract_writes_readable_bank() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let bank_path = dir.path().join("image.pingfb");
    let out = bin()
        .args(["extract", "--config"])
        .arg(&cfg)
        .args(["--modality", "image", "--out"])
        .arg(&bank_path)
        .output()
        .unwrap();
    assert_success(&out);
    let bank = clip_ping_core::read_bank(&bank_path).unwrap();
    assert_eq!(bank.modality(), clip_ping_core::Modality::Image);
    assert_eq!(bank.len(), 64 + 16 + 16);
    assert_eq!(bank.dim(), 9);
}

#[test]
fn train_writes_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run_dir = dir.path().join("run");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--method", "clip-ping", "--seed", "7", "--out"])
        .arg(&run_dir)
        .output()
        .unwrap();
    assert_success(&out);

    for name in [
        "manifest.json",
        "checkpoint.pingckpt",
        "runlog.csv",
        "metrics.csv",
        "bank_image.pingfb",
        "bank_text.pingfb",
    ] {
        assert!(run_dir.join(name).exists(), "missing artifact {name}");
    }

    let runlog = std::fs::read_to_string(run_dir.join("runlog.csv")).unwrap();
    let lines: Vec<&str> = runlog.lines().collect();
    assert_eq!(lines.len(), 1 + 2, "header plus one line per epoch");
    assert!(lines[0].starts_with("epoch,lr_image,lr_text"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["method"], "clip-ping");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_raw"], tiny_config());
}

#[test]
fn train_is_deterministic_for_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    for run in ["a", "b"] {
        let out = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--method", "clip-ping", "--out"])
            .arg(dir.path().join(run))
            .output()
            .unwrap();
        assert_success(&out);
    }
    let a = std::fs::read(dir.path().join("a/checkpoint.pingckpt")).unwrap();
    let b = std::fs::read(dir.path().join("b/checkpoint.pingckpt")).unwrap();
    assert_eq!(a, b, "same config must reproduce the checkpoint bit for bit");
}

#[test]
fn eval_fills_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run_dir = dir.path().join("run");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--method", "clip-ping", "--out"])
        .arg(&run_dir)
        .output()
        .unwrap();
    assert_success(&out);

    let out = bin()
        .args(["eval", "--run"])
        .arg(&run_dir)
        .args(["--split", "test", "--k", "1,5"])
        .output()
        .unwrap();
    assert_success(&out);

    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "method,seed,split,metric,k,value");
    assert!(
        lines.len() - 1 >= 6,
        "expected at least six metric rows, got {}",
        lines.len() - 1
    );
    for line in &lines[1..] {
        assert!(line.starts_with("clip-ping,5,test,"), "bad row {line}");
        let value: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&value));
    }
    let metric_names: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(3).unwrap())
        .collect();
    for expected in [
        "i2t_recall",
        "t2i_recall",
        "zero_shot_top1",
        "linear_probe_top1",
    ] {
        assert!(metric_names.contains(&expected), "missing {expected}");
    }
}

#[test]
fn ablate_emits_one_row_per_value_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let csv_path = dir.path().join("sweep.csv");
    let out = bin()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--param", "alpha", "--values", "0,0.25,0.5,0.75,1"])
        .args(["--seeds", "3", "--out"])
        .arg(&csv_path)
        .output()
        .unwrap();
    assert_success(&out);

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "param,value,seed,method,i2t_at_1,t2i_at_1,zero_shot_top1");
    assert_eq!(lines.len() - 1, 15, "five values times three seeds");
    assert!(lines[1].starts_with("alpha,0,0,clip-ping,"));
    assert!(lines[15].starts_with("alpha,1,2,clip-ping,"));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--method", "clip-kd", "--out"])
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("clip-ping"), "stderr must list supported methods: {stderr}");
    assert!(stderr.contains("a-clip-ping"));
}

#[test]
fn unknown_ablation_parameter_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = bin()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--param", "gamma", "--values", "1", "--seeds", "1", "--out"])
        .arg(dir.path().join("sweep.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown ablation parameter"));
}

#[test]
fn missing_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(dir.path().join("nope.json"))
        .args(["--method", "clip", "--out"])
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn unknown_config_key_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.json");
    std::fs::write(&path, r#"{"alpa": 0.5}"#).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&path)
        .args(["--method", "clip", "--out"])
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("alpa"), "error should name the bad key: {stderr}");
}
