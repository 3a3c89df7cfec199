//! End-to-end tests of the `mitoforge` binary: subcommand wiring, JSON
//! output contracts, seed handling, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mitoforge::augment::AugmentConfig;
use mitoforge::image::ImagePatch;
use mitoforge::train::TrainConfig;
use mitoforge::vit::ViTConfig;
use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_mitoforge");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_with_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(BIN).args(args).env(key, value).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("not killed by signal")
}

/// Generate a small corpus and return its manifest path.
fn synth(dir: &Path, n: usize, frac: f64, seed: u64) -> PathBuf {
    let out = run(&[
        "synth-data",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        &n.to_string(),
        "--atypical-frac",
        &frac.to_string(),
        "--domains",
        "2",
        "--seed",
        &seed.to_string(),
    ]);
    let json = stdout_json(&out);
    PathBuf::from(json["manifest"].as_str().expect("manifest path"))
}

/// One-epoch config on a depth-1 model, augmentation off, for fast runs.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        seed: 5,
        vit: ViTConfig {
            image_size: 128,
            patch_size: 16,
            depth: 1,
            width: 32,
            heads: 4,
            mlp_ratio: 2.0,
            n_classes: 2,
        },
        augment: AugmentConfig::disabled(),
        ..TrainConfig::default()
    };
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn synth_then_split_flow() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let manifest = synth(&data, 16, 0.25, 9);
    assert!(manifest.is_file());

    let plan_path = dir.path().join("plan.json");
    let out = run(&[
        "cv-split",
        "--manifest",
        manifest.to_str().unwrap(),
        "--k",
        "2",
        "--seed",
        "3",
        "--out",
        plan_path.to_str().unwrap(),
    ]);
    let json = stdout_json(&out);
    assert_eq!(json["plan"]["k"], 2);
    assert_eq!(json["plan"]["assignments"].as_array().unwrap().len(), 16);

    let written: Value =
        serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert_eq!(written, json["plan"]);
}

#[test]
fn synth_data_is_reproducible_across_worker_counts() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (path, workers) in [(&a, "1"), (&b, "3")] {
        let out = run(&[
            "--workers",
            workers,
            "synth-data",
            "--out",
            path.to_str().unwrap(),
            "--n",
            "10",
            "--seed",
            "4",
        ]);
        stdout_json(&out);
    }
    for name in ["crop_00000.png", "crop_00007.png"] {
        let bytes_a = std::fs::read(a.join(name)).unwrap();
        let bytes_b = std::fs::read(b.join(name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{name} differs across worker counts");
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let out = run_with_env(
        &["synth-data", "--out", dir.path().join("d").to_str().unwrap(), "--n", "2"],
        "MITOFORGE_SEED",
        "13",
    );
    assert_eq!(stdout_json(&out)["config"]["seed"], 13);

    let bad = run_with_env(
        &["synth-data", "--out", dir.path().join("e").to_str().unwrap(), "--n", "2"],
        "MITOFORGE_SEED",
        "banana",
    );
    assert_eq!(exit_code(&bad), 1);
}

#[test]
fn predict_emits_the_documented_line() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let manifest = synth(&data, 12, 0.25, 5);
    let config = write_tiny_config(dir.path());

    let out = run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--no-val",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    let checkpoint = stdout_json(&out)["checkpoint"].as_str().unwrap().to_owned();

    let out = run(&[
        "predict",
        "--image",
        data.join("crop_00001.png").to_str().unwrap(),
        "--checkpoint",
        &checkpoint,
        "--tta",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1, "predict prints exactly one line");
    assert!(text.starts_with("{\"logits\":["), "field order: {text}");

    let json: Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(json["logits"].as_array().unwrap().len(), 2);
    let p = json["prob_atypical"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0);
    let label = json["label"].as_str().unwrap();
    assert!(label == "normal" || label == "atypical", "label {label}");
}

#[test]
fn eval_reproduces_the_runlog_validation_score() {
    let dir = TempDir::new().unwrap();
    let train_manifest = synth(&dir.path().join("train"), 12, 0.25, 5);
    let val_manifest = synth(&dir.path().join("val"), 8, 0.25, 6);
    let config = write_tiny_config(dir.path());
    let run_dir = dir.path().join("run");

    let out = run(&[
        "train",
        "--manifest",
        train_manifest.to_str().unwrap(),
        "--val-manifest",
        val_manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    let train_json = stdout_json(&out);
    let checkpoint = train_json["checkpoint"].as_str().unwrap().to_owned();
    assert!(checkpoint.ends_with("best.ckpt"));

    let runlog = std::fs::read_to_string(run_dir.join("runlog.jsonl")).unwrap();
    let last: Value =
        serde_json::from_str(runlog.lines().last().expect("runlog has entries")).unwrap();
    let logged_ba = last["val_ba"].as_f64().expect("validation ran");

    let out = run(&[
        "eval",
        "--checkpoint",
        &checkpoint,
        "--manifest",
        val_manifest.to_str().unwrap(),
    ]);
    let report_ba = stdout_json(&out)["report"]["balanced_accuracy"].as_f64().unwrap();
    assert_eq!(report_ba, logged_ba, "eval must reproduce the logged score exactly");
}

#[test]
fn stain_fit_then_augment_preview() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let manifest = synth(&data, 4, 0.5, 2);
    let pool_path = dir.path().join("pool.json");

    let out = run(&[
        "stain-fit",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        pool_path.to_str().unwrap(),
    ]);
    let json = stdout_json(&out);
    assert!(pool_path.is_file());
    assert_eq!(json["skipped"], 0);

    let sheet = dir.path().join("sheet.png");
    let out = run(&[
        "augment-preview",
        "--image",
        data.join("crop_00000.png").to_str().unwrap(),
        "--out",
        sheet.to_str().unwrap(),
        "--rows",
        "2",
        "--cols",
        "3",
        "--seed",
        "1",
        "--stain-pool",
        pool_path.to_str().unwrap(),
    ]);
    let json = stdout_json(&out);
    assert_eq!(json["cells"], 6);

    let img = ImagePatch::load_png(&sheet).unwrap();
    assert_eq!((img.width(), img.height()), (3 * 128, 2 * 128));

    let sidecar: Value = serde_json::from_str(
        &std::fs::read_to_string(json["sidecar"].as_str().unwrap()).unwrap(),
    )
    .unwrap();
    let cells = sidecar.as_array().unwrap();
    assert_eq!(cells.len(), 6);
    assert!(cells.iter().all(|c| c["steps"].is_array()));
}

#[test]
fn exit_codes_separate_validation_from_runtime_failures() {
    let dir = TempDir::new().unwrap();

    let out = run(&["--bogus-flag"]);
    assert_eq!(exit_code(&out), 1, "unknown flag is a validation error");

    let bad_manifest = dir.path().join("bad.csv");
    std::fs::write(&bad_manifest, "path,label,domain,dataset\nx.png,banana,d,s\n").unwrap();
    let out = run(&["cv-split", "--manifest", bad_manifest.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1, "unparseable manifest is a validation error");

    let manifest = synth(&dir.path().join("d"), 4, 0.5, 1);
    let out = run(&[
        "eval",
        "--checkpoint",
        dir.path().join("missing.ckpt").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2, "missing checkpoint file is a runtime error");

    let out = run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1, "train requires --val-manifest or --no-val");

    let out = run(&["gradcheck", "--instances", "2", "--seed", "1"]);
    assert_eq!(exit_code(&out), 0, "gradient checks pass");
}
