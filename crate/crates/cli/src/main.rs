//! `mitoforge` command-line interface.
//!
//! One command per process. Machine-readable JSON goes to stdout, logs to
//! stderr. Exit codes: 0 success, 1 validation error (bad flags, bad config,
//! malformed inputs), 2 runtime error (I/O, numeric failure).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use mitoforge::augment::build_pipeline;
use mitoforge::data::{
    dataset_stats, label_name, parse_manifest, stratified_kfold, synth_generate, SampleRecord,
};
use mitoforge::fsutil::atomic_write;
use mitoforge::image::ImagePatch;
use mitoforge::metrics::argmax2;
use mitoforge::stain::{fit_profile, StainParams, StainProfile, StainProfilePool};
use mitoforge::tensor::gradcheck::{standard_suite, GRAD_TOLERANCE};
use mitoforge::train::{adapt, evaluate, predict_logits, train, RunMode, TrainConfig};
use mitoforge::vit::load_checkpoint;
use mitoforge::{Error, Result};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mitoforge", version, about = "Mitosis-figure classification toolkit")]
struct Cli {
    /// Worker threads for parallel sections (default: available cores).
    /// Results are independent of this value.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic crop corpus plus manifest.
    SynthData {
        /// Output directory for crops and manifest.csv.
        #[arg(long)]
        out: PathBuf,
        /// Number of crops to generate.
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Fraction of crops labeled atypical, in (0, 1).
        #[arg(long, default_value_t = 0.2)]
        atypical_frac: f64,
        /// Number of distinct stain domains (1..=8).
        #[arg(long, default_value_t = 2)]
        domains: usize,
        /// RNG seed (falls back to MITOFORGE_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
    },

    /// Fit per-domain stain profiles from a manifest and save them as a pool.
    StainFit {
        /// Manifest CSV listing the reference images.
        #[arg(long)]
        manifest: PathBuf,
        /// Output path for the profile pool JSON.
        #[arg(long)]
        out: PathBuf,
    },

    /// Build a stratified k-fold cross-validation plan from a manifest.
    CvSplit {
        /// Manifest CSV to split.
        #[arg(long)]
        manifest: PathBuf,
        /// Number of folds.
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// RNG seed (falls back to MITOFORGE_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated dataset names excluded from folds (held out).
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<String>,
        /// Optional path to also write the plan JSON to.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Train a model and write checkpoints plus a run log.
    Train {
        /// Training manifest CSV.
        #[arg(long)]
        manifest: PathBuf,
        /// Validation manifest CSV (tracks the best checkpoint).
        #[arg(long, conflicts_with = "no_val")]
        val_manifest: Option<PathBuf>,
        /// Train without a validation set (best checkpoint = last epoch).
        #[arg(long)]
        no_val: bool,
        /// Training config JSON; flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// RNG seed (overrides config file; falls back to MITOFORGE_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the batch size.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Override the training mode.
        #[arg(long)]
        mode: Option<ModeArg>,
        /// Stain profile pool JSON for stain augmentation.
        #[arg(long)]
        stain_pool: Option<PathBuf>,
        /// Warm-start from this checkpoint instead of a fresh initialization
        /// (in frozen-backbone mode, adapters are attached if absent).
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },

    /// Evaluate a checkpoint on a manifest and report balanced accuracy.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest CSV with ground-truth labels.
        #[arg(long)]
        manifest: PathBuf,
        /// Average logits over the four 90-degree rotations.
        #[arg(long)]
        tta: bool,
    },

    /// Classify a single image.
    Predict {
        /// Image to classify (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Average logits over the four 90-degree rotations.
        #[arg(long)]
        tta: bool,
    },

    /// Render a contact sheet of augmented variants of one image.
    AugmentPreview {
        /// Source image (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Output PNG path; a .json sidecar records the applied steps.
        #[arg(long)]
        out: PathBuf,
        /// Sheet rows.
        #[arg(long, default_value_t = 4)]
        rows: usize,
        /// Sheet columns.
        #[arg(long, default_value_t = 6)]
        cols: usize,
        /// RNG seed (falls back to MITOFORGE_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Training config JSON; its augmentation section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stain profile pool JSON for stain augmentation.
        #[arg(long)]
        stain_pool: Option<PathBuf>,
    },

    /// Run the finite-difference gradient check battery.
    Gradcheck {
        /// RNG seed (falls back to MITOFORGE_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of random instances per op.
        #[arg(long, default_value_t = 20)]
        instances: u64,
    },
}

/// CLI spelling of the training mode.
#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    FullFinetune,
    LoraFrozenBackbone,
    LinearProbe,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> RunMode {
        match m {
            ModeArg::FullFinetune => RunMode::FullFinetune,
            ModeArg::LoraFrozenBackbone => RunMode::LoraFrozenBackbone,
            ModeArg::LinearProbe => RunMode::LinearProbe,
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            eprintln!("{e}");
            std::process::exit(1);
        }
    };

    if let Some(workers) = cli.workers {
        if workers == 0 {
            log::error!("--workers must be at least 1");
            std::process::exit(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
            log::error!("failed to size the worker pool: {e}");
            std::process::exit(2);
        }
    }

    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            log::error!("{e}");
            std::process::exit(if e.is_validation() { 1 } else { 2 });
        }
    }
}

/// Seed precedence: explicit flag, then MITOFORGE_SEED, then 0.
fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("MITOFORGE_SEED") {
        Ok(raw) => raw
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("MITOFORGE_SEED {raw:?} is not a u64"))),
        Err(_) => Ok(0),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("encoding output: {e}")))?;
    println!("{text}");
    Ok(())
}

fn load_pool(path: Option<&Path>) -> Result<Option<StainProfilePool>> {
    path.map(StainProfilePool::load_json).transpose()
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::SynthData { out, n, atypical_frac, domains, seed } => {
            let seed = resolve_seed(seed)?;
            let records = synth_generate(n, atypical_frac, domains, seed, &out)?;
            let stats = dataset_stats(&records);
            print_json(&json!({
                "command": "synth-data",
                "config": {
                    "out": out, "n": n, "atypical_frac": atypical_frac,
                    "domains": domains, "seed": seed,
                },
                "manifest": out.join("manifest.csv"),
                "stats": stats,
            }))?;
            Ok(0)
        }

        Command::StainFit { manifest, out } => {
            let records = parse_manifest(&manifest)?;
            let pool = fit_pool(&records)?;
            pool.save_json(&out)?;
            let mut images: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &records {
                *images.entry(r.domain.as_str()).or_insert(0) += 1;
            }
            let fitted: BTreeMap<&str, usize> =
                pool.domains.iter().map(|(d, v)| (d.as_str(), v.len())).collect();
            let skipped: usize = images
                .iter()
                .map(|(d, &n)| n - fitted.get(d).copied().unwrap_or(0))
                .sum();
            print_json(&json!({
                "command": "stain-fit",
                "config": { "manifest": manifest, "out": out },
                "domains": fitted,
                "images": images,
                "skipped": skipped,
            }))?;
            Ok(0)
        }

        Command::CvSplit { manifest, k, seed, holdout, out } => {
            let seed = resolve_seed(seed)?;
            let records = parse_manifest(&manifest)?;
            let plan = stratified_kfold(&records, k, seed, &holdout)?;
            if let Some(path) = &out {
                let text = serde_json::to_string_pretty(&plan)
                    .map_err(|e| Error::Format(format!("encoding fold plan: {e}")))?;
                atomic_write(path, text.as_bytes())?;
            }
            print_json(&json!({
                "command": "cv-split",
                "config": {
                    "manifest": manifest, "k": k, "seed": seed,
                    "holdout": holdout, "out": out,
                },
                "plan": plan,
            }))?;
            Ok(0)
        }

        Command::Train {
            manifest,
            val_manifest,
            no_val,
            config,
            out,
            seed,
            epochs,
            batch_size,
            mode,
            stain_pool,
            init_checkpoint,
        } => {
            let mut cfg = match &config {
                Some(path) => read_train_config(path)?,
                None => TrainConfig::default(),
            };
            // Flag beats file; file beats the env fallback.
            cfg.seed = match seed {
                Some(s) => s,
                None if config.is_some() => cfg.seed,
                None => resolve_seed(None)?,
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(m) = mode {
                cfg.mode = m.into();
            }

            let train_records = parse_manifest(&manifest)?;
            let val_records = match &val_manifest {
                Some(path) => Some(parse_manifest(path)?),
                None if no_val => None,
                None => {
                    return Err(Error::Config(
                        "pass --val-manifest, or --no-val to train without validation".into(),
                    ))
                }
            };
            let pool = load_pool(stain_pool.as_deref())?;

            log::info!(
                "resolved config: {}",
                serde_json::to_string(&cfg)
                    .map_err(|e| Error::Format(format!("encoding config: {e}")))?
            );
            let outcome = match &init_checkpoint {
                Some(base) => adapt(base, &cfg, &train_records, val_records.as_deref(), pool, &out)?,
                None => train(&cfg, &train_records, val_records.as_deref(), pool, &out)?,
            };
            print_json(&json!({
                "command": "train",
                "config": cfg,
                "out": out,
                "checkpoint": outcome.checkpoint,
                "best_epoch": outcome.best_epoch,
                "total_steps": outcome.total_steps,
                "epochs": outcome.log,
            }))?;
            Ok(0)
        }

        Command::Eval { checkpoint, manifest, tta } => {
            let records = parse_manifest(&manifest)?;
            let report = evaluate(&checkpoint, &records, tta)?;
            print_json(&json!({
                "command": "eval",
                "config": { "checkpoint": checkpoint, "manifest": manifest, "tta": tta },
                "report": report,
            }))?;
            Ok(0)
        }

        Command::Predict { image, checkpoint, tta } => {
            log::info!(
                "resolved config: image={} checkpoint={} tta={tta}",
                image.display(),
                checkpoint.display()
            );
            let model = load_checkpoint(&checkpoint)?;
            let img = ImagePatch::load_png(&image)?;
            let logits = predict_logits(&model, &img, tta)?;
            // Fixed output shape; keep it a single compact line.
            let line = serde_json::to_string(&Prediction {
                logits,
                prob_atypical: prob_positive(logits),
                label: label_name(argmax2(logits)),
            })
            .map_err(|e| Error::Format(format!("encoding prediction: {e}")))?;
            println!("{line}");
            Ok(0)
        }

        Command::AugmentPreview { image, out, rows, cols, seed, config, stain_pool } => {
            let seed = resolve_seed(seed)?;
            if rows == 0 || cols == 0 {
                return Err(Error::Config("preview sheet needs rows >= 1 and cols >= 1".into()));
            }
            let aug_cfg = match &config {
                Some(path) => read_train_config(path)?.augment,
                None => TrainConfig::default().augment,
            };
            let pool = load_pool(stain_pool.as_deref())?;
            let pipeline = build_pipeline(aug_cfg, pool, seed)?;
            let img = ImagePatch::load_png(&image)?;

            let (w, h) = (img.width(), img.height());
            let mut sheet = ImagePatch::filled(cols * w, rows * h, [255, 255, 255])?;
            let mut cells = Vec::with_capacity(rows * cols);
            for idx in 0..rows * cols {
                let (_, preview, trace) = pipeline.augment_with_preview(&img, idx as u64, 0)?;
                if preview.width() != w || preview.height() != h {
                    return Err(Error::Contract(format!(
                        "preview cell {idx} is {}x{}, expected {w}x{h}",
                        preview.width(),
                        preview.height()
                    )));
                }
                let (row, col) = (idx / cols, idx % cols);
                for y in 0..h {
                    for x in 0..w {
                        sheet.set(col * w + x, row * h + y, preview.get(x, y));
                    }
                }
                cells.push(json!({ "cell": idx, "row": row, "col": col, "steps": trace }));
            }
            sheet.save_png(&out)?;
            let sidecar = sidecar_path(&out);
            let text = serde_json::to_string_pretty(&cells)
                .map_err(|e| Error::Format(format!("encoding trace sidecar: {e}")))?;
            atomic_write(&sidecar, text.as_bytes())?;
            print_json(&json!({
                "command": "augment-preview",
                "config": {
                    "image": image, "rows": rows, "cols": cols, "seed": seed,
                    "augment": pipeline.config(),
                },
                "out": out,
                "sidecar": sidecar,
                "cells": rows * cols,
            }))?;
            Ok(0)
        }

        Command::Gradcheck { seed, instances } => {
            let seed = resolve_seed(seed)?;
            if instances == 0 {
                return Err(Error::Config("gradcheck needs at least 1 instance".into()));
            }
            let mut worst: BTreeMap<&'static str, f32> = BTreeMap::new();
            for i in 0..instances {
                for outcome in standard_suite(seed + i)? {
                    let entry = worst.entry(outcome.name).or_insert(0.0);
                    *entry = entry.max(outcome.max_rel_err);
                }
            }
            let pass = worst.values().all(|&e| e <= GRAD_TOLERANCE);
            let checks: Vec<_> = worst
                .iter()
                .map(|(name, err)| json!({ "name": name, "max_rel_err": err }))
                .collect();
            print_json(&json!({
                "command": "gradcheck",
                "config": { "seed": seed, "instances": instances },
                "tolerance": GRAD_TOLERANCE,
                "pass": pass,
                "checks": checks,
            }))?;
            Ok(if pass { 0 } else { 2 })
        }
    }
}

fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Single-image classification result; field order matches the documented
/// output shape.
#[derive(Serialize)]
struct Prediction {
    logits: [f32; 2],
    prob_atypical: f64,
    label: &'static str,
}

/// Softmax probability of the positive (atypical) class, computed stably in f64.
fn prob_positive(logits: [f32; 2]) -> f64 {
    let d = f64::from(logits[1]) - f64::from(logits[0]);
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    out.with_file_name(name)
}

/// Fit one profile per usable image, grouped by domain. Images without
/// enough stain signal are skipped with a warning; other failures abort.
fn fit_pool(records: &[SampleRecord]) -> Result<StainProfilePool> {
    let params = StainParams::default();
    let fits: Vec<Result<Option<StainProfile>>> = {
        use rayon::prelude::*;
        records
            .par_iter()
            .map(|r| {
                let img = ImagePatch::load_png(&r.path)?;
                match fit_profile(&img, &r.domain, &params) {
                    Ok(profile) => Ok(Some(profile)),
                    Err(e @ (Error::Degenerate(_) | Error::Numeric(_))) => {
                        log::warn!("skipping {}: {e}", r.path.display());
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect()
    };
    let mut pool = StainProfilePool::default();
    for fit in fits {
        if let Some(profile) = fit? {
            pool.insert(profile);
        }
    }
    if pool.is_empty() {
        return Err(Error::Contract(
            "no image yielded a stain profile; the pool would be empty".into(),
        ));
    }
    Ok(pool)
}
