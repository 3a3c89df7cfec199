//! Training orchestration: focal-loss AdamW training under a warmup-cosine
//! schedule with per-epoch and best-by-validation checkpoints, test-time
//! augmented evaluation, k-fold cross-validation, and frozen-feature linear
//! probing.
//!
//! Augmentation fans out across a worker pool; results are keyed by sample
//! index, so worker count never changes the outcome. The optimizer step is
//! strictly sequential.

use crate::augment::{build_pipeline, AugmentConfig};
use crate::data::{stratified_kfold, FoldPlan, SampleRecord};
use crate::error::{Error, Result};
use crate::image::{normalize_imagenet, ImagePatch, NormalizedImage};
use crate::losses::{focal_loss, FocalConfig};
use crate::metrics::{argmax2, balanced_accuracy, confusion_matrix, tta_predict, EvalReport};
use crate::optim::{adamw_step, clip_grad_norm, lr_at_step, OptimConfig, OptimState};
use crate::rng::RngStream;
use crate::stain::StainProfilePool;
use crate::tensor::{Graph, Tensor};
use crate::vit::{
    load_checkpoint, save_checkpoint, LoRAConfig, TrainMode, ViTConfig, ViTLoRAModel,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    FullFinetune,
    LoraFrozenBackbone,
    LinearProbe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: RunMode,
    pub vit: ViTConfig,
    pub lora: LoRAConfig,
    pub optim: OptimConfig,
    pub focal: FocalConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            seed: 0,
            mode: RunMode::FullFinetune,
            vit: ViTConfig::default(),
            lora: LoRAConfig::default(),
            optim: OptimConfig::default(),
            focal: FocalConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.vit.validate()?;
        self.lora.validate()?;
        self.optim.validate()?;
        self.focal.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// One completed epoch. `lr_first_step` is the schedule value at the
/// epoch's first optimizer step; `mean_grad_norm` averages pre-clip norms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ba: Option<f64>,
    pub lr_first_step: f64,
    pub mean_grad_norm: f64,
    pub wall_secs: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Best-by-validation checkpoint, or the last epoch without validation.
    pub checkpoint: PathBuf,
    pub best_epoch: Option<usize>,
    pub total_steps: u64,
    pub log: Vec<EpochLog>,
}

pub fn load_images(records: &[SampleRecord]) -> Result<Vec<ImagePatch>> {
    records
        .par_iter()
        .map(|r| ImagePatch::load_png(&r.path))
        .collect()
}

fn require_both_classes(records: &[SampleRecord], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract(format!("empty {what} manifest")));
    }
    let atypical = records.iter().filter(|r| r.label == 1).count();
    if atypical == 0 || atypical == records.len() {
        return Err(Error::Contract(format!(
            "single-class {what} set ({atypical} of {} atypical)",
            records.len()
        )));
    }
    Ok(())
}

fn check_trainable_mode(cfg: &TrainConfig, train_records: &[SampleRecord]) -> Result<()> {
    cfg.validate()?;
    if cfg.mode == RunMode::LinearProbe {
        return Err(Error::Contract(
            "probe training goes through linear_probe, not train".into(),
        ));
    }
    require_both_classes(train_records, "training")
}

/// Train a freshly initialized model over `train_records`, writing per-epoch
/// checkpoints, a `best.ckpt` when validation is present,
/// `train_config.json`, and `runlog.jsonl` under `out_dir`. Deterministic
/// given the config seed.
pub fn train(
    cfg: &TrainConfig,
    train_records: &[SampleRecord],
    val_records: Option<&[SampleRecord]>,
    pool: Option<StainProfilePool>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    check_trainable_mode(cfg, train_records)?;
    let lora = match cfg.mode {
        RunMode::LoraFrozenBackbone => Some(cfg.lora.clone()),
        _ => None,
    };
    let mut model = ViTLoRAModel::new(cfg.vit.clone(), lora, cfg.seed)?;
    if cfg.mode == RunMode::LoraFrozenBackbone {
        model.set_mode(TrainMode::LoraOnly)?;
    }
    run_training(cfg, &model, train_records, val_records, pool, out_dir)
}

/// Continue training from a saved checkpoint instead of a fresh
/// initialization. In frozen-backbone mode an adapter-free checkpoint (e.g.
/// from a full fine-tune) gets fresh adapters attached; a checkpoint that
/// already carries adapters keeps them, ignoring `cfg.lora`. The checkpoint
/// architecture must match `cfg.vit`.
pub fn adapt(
    base_checkpoint: &Path,
    cfg: &TrainConfig,
    train_records: &[SampleRecord],
    val_records: Option<&[SampleRecord]>,
    pool: Option<StainProfilePool>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    check_trainable_mode(cfg, train_records)?;
    let mut model = load_checkpoint(base_checkpoint)?;
    if model.vit_config() != &cfg.vit {
        return Err(Error::Contract(format!(
            "checkpoint architecture {:?} differs from configured {:?}",
            model.vit_config(),
            cfg.vit
        )));
    }
    match cfg.mode {
        RunMode::LoraFrozenBackbone => {
            if model.lora_config().is_none() {
                model.attach_adapters(cfg.lora.clone(), cfg.seed)?;
            }
            model.set_mode(TrainMode::LoraOnly)?;
        }
        RunMode::FullFinetune => model.set_mode(TrainMode::Full)?,
        RunMode::LinearProbe => unreachable!("rejected above"),
    }
    run_training(cfg, &model, train_records, val_records, pool, out_dir)
}

fn run_training(
    cfg: &TrainConfig,
    model: &ViTLoRAModel,
    train_records: &[SampleRecord],
    val_records: Option<&[SampleRecord]>,
    pool: Option<StainProfilePool>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let pipeline = build_pipeline(cfg.augment.clone(), pool, cfg.seed)?;

    let train_images = load_images(train_records)?;
    let val_images = val_records.map(load_images).transpose()?;

    let config_json = serde_json::to_vec_pretty(cfg)
        .map_err(|e| Error::Format(format!("config echo: {e}")))?;
    crate::fsutil::atomic_write(&out_dir.join("train_config.json"), &config_json)?;

    let n = train_records.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let params = model.trainable_parameters();
    let mut state = OptimState::new();
    let mut step: u64 = 0;
    let mut best: Option<(f64, usize)> = None;
    let mut log: Vec<EpochLog> = Vec::with_capacity(cfg.epochs);
    let mut runlog_text = String::new();
    let best_path = out_dir.join("best.ckpt");
    let mut last_epoch_path = PathBuf::new();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(cfg.seed, "shuffle", (epoch - 1) as u64, 0).shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut norm_sum = 0.0f64;
        let mut lr_first = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<NormalizedImage> = chunk
                .par_iter()
                .map(|&i| {
                    pipeline
                        .augment(&train_images[i], i as u64, (epoch - 1) as u64)
                        .map(|(norm, _)| norm)
                })
                .collect::<Result<_>>()?;
            let labels: Vec<u8> = chunk.iter().map(|&i| train_records[i].label).collect();

            let mut graph = Graph::new();
            let mut dropout_stream = RngStream::new(cfg.seed, "dropout", step, 0);
            let logits = model.forward(&mut graph, &batch, true, &mut dropout_stream)?;
            let loss = focal_loss(&mut graph, &logits, &labels, &cfg.focal)?;
            let loss_value = f64::from(loss.item()?);
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss {loss_value} at step {step}"
                )));
            }
            graph.backward(&loss)?;

            let pre_clip = clip_grad_norm(&params, cfg.optim.clip_norm as f32)?;
            let lr = lr_at_step(step, total_steps, &cfg.optim)?;
            if step % steps_per_epoch as u64 == 0 {
                lr_first = lr;
            }
            adamw_step(&params, &mut state, lr as f32, &cfg.optim)?;
            for p in &params {
                p.zero_grad();
            }

            loss_sum += loss_value * chunk.len() as f64;
            norm_sum += f64::from(pre_clip);
            step += 1;
        }

        let val_ba = match (val_records, &val_images) {
            (Some(records), Some(images)) => {
                Some(evaluate_in_memory(model, records, images, false)?.balanced_accuracy)
            }
            _ => None,
        };

        last_epoch_path = out_dir.join(format!("epoch_{epoch:03}.ckpt"));
        save_checkpoint(model, &last_epoch_path)?;
        if let Some(ba) = val_ba {
            // Strict improvement keeps the earlier epoch on ties.
            if best.is_none_or(|(b, _)| ba > b) {
                best = Some((ba, epoch));
                save_checkpoint(model, &best_path)?;
            }
        }

        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / n as f64,
            val_ba,
            lr_first_step: lr_first,
            mean_grad_norm: norm_sum / steps_per_epoch as f64,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        runlog_text.push_str(
            &serde_json::to_string(&entry).map_err(|e| Error::Format(format!("runlog: {e}")))?,
        );
        runlog_text.push('\n');
        crate::fsutil::atomic_write(&out_dir.join("runlog.jsonl"), runlog_text.as_bytes())?;
        log.push(entry);
    }

    let (checkpoint, best_epoch) = match best {
        Some((_, epoch)) => (best_path, Some(epoch)),
        None => (last_epoch_path, None),
    };
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        total_steps: step,
        log,
    })
}

fn forward_eval_logits(model: &ViTLoRAModel, images: &[NormalizedImage]) -> Result<Vec<[f32; 2]>> {
    let mut graph = Graph::no_grad();
    let mut unused = RngStream::for_purpose(0, "eval");
    let logits = model.forward(&mut graph, images, false, &mut unused)?;
    Ok(logits
        .to_vec()
        .chunks_exact(2)
        .map(|c| [c[0], c[1]])
        .collect())
}

/// Evaluate an in-memory model: eval-mode forward (mean-logit TTA over the
/// four rotations when flagged), argmax predictions, pooled confusion and
/// balanced accuracy plus per-domain balanced accuracies. Domains where the
/// metric is undefined (one class absent) are skipped with a warning.
pub fn evaluate_in_memory(
    model: &ViTLoRAModel,
    records: &[SampleRecord],
    images: &[ImagePatch],
    tta: bool,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Contract("empty evaluation manifest".into()));
    }
    if records.len() != images.len() {
        return Err(Error::Contract(format!(
            "{} records but {} images",
            records.len(),
            images.len()
        )));
    }

    let mut preds: Vec<u8> = Vec::with_capacity(records.len());
    if tta {
        for img in images {
            let mean_logits = tta_predict(img, |patch| {
                let normalized = normalize_imagenet(patch);
                Ok(forward_eval_logits(model, std::slice::from_ref(&normalized))?[0])
            })?;
            preds.push(argmax2(mean_logits));
        }
    } else {
        for chunk in images.chunks(EVAL_BATCH) {
            let normalized: Vec<NormalizedImage> =
                chunk.par_iter().map(normalize_imagenet).collect();
            for logits in forward_eval_logits(model, &normalized)? {
                preds.push(argmax2(logits));
            }
        }
    }

    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let confusion = confusion_matrix(&preds, &labels)?;

    let mut by_domain: BTreeMap<&str, (Vec<u8>, Vec<u8>)> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let entry = by_domain.entry(r.domain.as_str()).or_default();
        entry.0.push(preds[i]);
        entry.1.push(labels[i]);
    }
    let mut per_domain = BTreeMap::new();
    for (domain, (dp, dl)) in by_domain {
        let dc = confusion_matrix(&dp, &dl)?;
        match balanced_accuracy(&dc) {
            Ok(ba) => {
                per_domain.insert(domain.to_string(), ba);
            }
            Err(Error::UndefinedMetric(_)) => {
                log::warn!("domain {domain}: balanced accuracy undefined, skipping");
            }
            Err(e) => return Err(e),
        }
    }
    EvalReport::new(confusion, per_domain)
}

/// Evaluate a saved checkpoint against a manifest.
pub fn evaluate(checkpoint: &Path, records: &[SampleRecord], tta: bool) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?;
    let images = load_images(records)?;
    evaluate_in_memory(&model, records, &images, tta)
}

/// Eval-mode logits for one image: a single forward, or the mean over the
/// four rotations when `tta` is set.
pub fn predict_logits(model: &ViTLoRAModel, img: &ImagePatch, tta: bool) -> Result<[f32; 2]> {
    let single = |patch: &ImagePatch| {
        let normalized = normalize_imagenet(patch);
        Ok(forward_eval_logits(model, std::slice::from_ref(&normalized))?[0])
    };
    if tta {
        tta_predict(img, single)
    } else {
        single(img)
    }
}

#[derive(Debug, Serialize)]
pub struct CvSummary {
    pub k: usize,
    pub plan: FoldPlan,
    pub fold_reports: Vec<EvalReport>,
    /// One report per fold model on the held-out datasets; empty when no
    /// holdout was requested.
    pub holdout_reports: Vec<EvalReport>,
    pub mean_ba: f64,
    /// Population standard deviation across folds.
    pub std_ba: f64,
}

/// K independent trainings on stratified folds, each seeded from
/// (seed, fold) and evaluated on its own validation fold plus the holdout.
pub fn cross_validate(
    cfg: &TrainConfig,
    records: &[SampleRecord],
    k: usize,
    holdout_datasets: &[String],
    pool: Option<StainProfilePool>,
    out_dir: &Path,
) -> Result<CvSummary> {
    let plan = stratified_kfold(records, k, cfg.seed, holdout_datasets)?;
    let holdout_records: Vec<SampleRecord> = plan
        .holdout_indices()
        .into_iter()
        .map(|i| records[i].clone())
        .collect();

    let mut fold_reports = Vec::with_capacity(k);
    let mut holdout_reports = Vec::new();
    for fold in 0..k as u32 {
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = RngStream::new(cfg.seed, "fold", u64::from(fold), 0).next_u64();
        let train_records: Vec<SampleRecord> = plan
            .train_indices(fold)
            .into_iter()
            .map(|i| records[i].clone())
            .collect();
        let val_records: Vec<SampleRecord> = plan
            .val_indices(fold)
            .into_iter()
            .map(|i| records[i].clone())
            .collect();
        let fold_dir = out_dir.join(format!("fold_{fold}"));
        let outcome = train(
            &fold_cfg,
            &train_records,
            Some(&val_records),
            pool.clone(),
            &fold_dir,
        )?;
        fold_reports.push(evaluate(&outcome.checkpoint, &val_records, false)?);
        if !holdout_records.is_empty() {
            holdout_reports.push(evaluate(&outcome.checkpoint, &holdout_records, false)?);
        }
    }

    let bas: Vec<f64> = fold_reports.iter().map(|r| r.balanced_accuracy).collect();
    let mean_ba = bas.iter().sum::<f64>() / bas.len() as f64;
    let variance = bas.iter().map(|b| (b - mean_ba).powi(2)).sum::<f64>() / bas.len() as f64;
    Ok(CvSummary {
        k,
        plan,
        fold_reports,
        holdout_reports,
        mean_ba,
        std_ba: variance.sqrt(),
    })
}

#[derive(Debug, Serialize)]
pub struct ProbeOutcome {
    pub balanced_accuracy: f64,
    pub report: EvalReport,
}

fn extract_features(
    model: &ViTLoRAModel,
    records: &[SampleRecord],
) -> Result<(Vec<Vec<f32>>, usize)> {
    let images = load_images(records)?;
    let width = model.vit_config().width;
    let mut features = Vec::with_capacity(records.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let normalized: Vec<NormalizedImage> = chunk.par_iter().map(normalize_imagenet).collect();
        let mut graph = Graph::no_grad();
        let batch = model.forward_features(&mut graph, &normalized)?;
        for row in batch.to_vec().chunks_exact(width) {
            features.push(row.to_vec());
        }
    }
    Ok((features, width))
}

/// Freeze the checkpoint's backbone, extract classification-token features
/// once (no augmentation), train a fresh linear head with the same focal
/// loss and optimizer, and report balanced accuracy on the test manifest.
/// The loaded model is never mutated.
pub fn linear_probe(
    checkpoint: &Path,
    cfg: &TrainConfig,
    train_records: &[SampleRecord],
    test_records: &[SampleRecord],
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    require_both_classes(train_records, "probe training")?;
    if test_records.is_empty() {
        return Err(Error::Contract("empty probe test manifest".into()));
    }
    let model = load_checkpoint(checkpoint)?;
    let (train_features, width) = extract_features(&model, train_records)?;
    let (test_features, _) = extract_features(&model, test_records)?;

    let mut init = RngStream::for_purpose(cfg.seed, "probe-init");
    let head_w = Tensor::randn(&[2, width], 0.02, &mut init).with_requires_grad(true);
    let head_b = Tensor::zeros(&[2]).with_requires_grad(true);
    let head = [head_w.clone(), head_b.clone()];

    let n = train_records.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut state = OptimState::new();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(cfg.seed, "probe-shuffle", epoch, 0).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut flat = Vec::with_capacity(chunk.len() * width);
            for &i in chunk {
                flat.extend_from_slice(&train_features[i]);
            }
            let x = Tensor::from_vec(flat, &[chunk.len(), width])?;
            let labels: Vec<u8> = chunk.iter().map(|&i| train_records[i].label).collect();

            let mut graph = Graph::new();
            let logits = graph.linear(&x, &head_w, Some(&head_b))?;
            let loss = focal_loss(&mut graph, &logits, &labels, &cfg.focal)?;
            graph.backward(&loss)?;
            clip_grad_norm(&head, cfg.optim.clip_norm as f32)?;
            let lr = lr_at_step(step, total_steps, &cfg.optim)?;
            adamw_step(&head, &mut state, lr as f32, &cfg.optim)?;
            for p in &head {
                p.zero_grad();
            }
            step += 1;
        }
    }

    let mut preds = Vec::with_capacity(test_records.len());
    for feature in &test_features {
        let x = Tensor::from_vec(feature.clone(), &[1, width])?;
        let mut graph = Graph::no_grad();
        let logits = graph.linear(&x, &head_w, Some(&head_b))?.to_vec();
        preds.push(argmax2([logits[0], logits[1]]));
    }
    let labels: Vec<u8> = test_records.iter().map(|r| r.label).collect();
    let confusion = confusion_matrix(&preds, &labels)?;
    let report = EvalReport::new(confusion, BTreeMap::new())?;
    Ok(ProbeOutcome {
        balanced_accuracy: report.balanced_accuracy,
        report,
    })
}
