//! Confusion matrix, balanced accuracy, rotation test-time augmentation,
//! and the evaluation report emitted by the CLI.

use crate::error::{Error, Result};
use crate::image::{d4_transform, ImagePatch, D4};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// counts[true_label][predicted_label].
pub type Confusion = [[u64; 2]; 2];

pub fn confusion_matrix(preds: &[u8], labels: &[u8]) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = [[0u64; 2]; 2];
    for (i, (&p, &l)) in preds.iter().zip(labels).enumerate() {
        if p > 1 || l > 1 {
            return Err(Error::Contract(format!(
                "sample {i}: prediction {p} / label {l} outside {{0,1}}"
            )));
        }
        counts[l as usize][p as usize] += 1;
    }
    Ok(counts)
}

/// Mean of per-class recalls.
pub fn balanced_accuracy(confusion: &Confusion) -> Result<f64> {
    let mut total = 0.0f64;
    for (class, row) in confusion.iter().enumerate() {
        let support: u64 = row.iter().sum();
        if support == 0 {
            return Err(Error::UndefinedMetric(format!(
                "class {class} has no samples; recall is undefined"
            )));
        }
        total += row[class] as f64 / support as f64;
    }
    Ok(total / confusion.len() as f64)
}

/// Argmax over two logits; ties go to class 0.
pub fn argmax2(logits: [f32; 2]) -> u8 {
    u8::from(logits[1] > logits[0])
}

/// Mean logits over the given rotations applied to the input, in the order
/// given. The forward closure receives each rotated 8-bit view and is
/// responsible for its own preprocessing.
pub fn tta_predict_with<F>(img: &ImagePatch, rotations: &[D4], forward: F) -> Result<[f32; 2]>
where
    F: Fn(&ImagePatch) -> Result<[f32; 2]>,
{
    if rotations.is_empty() {
        return Err(Error::Contract("tta needs at least one rotation".into()));
    }
    let mut acc = [0.0f64; 2];
    for &rot in rotations {
        let view = d4_transform(img, rot)?;
        let logits = forward(&view)?;
        acc[0] += f64::from(logits[0]);
        acc[1] += f64::from(logits[1]);
    }
    let n = rotations.len() as f64;
    Ok([(acc[0] / n) as f32, (acc[1] / n) as f32])
}

pub const TTA_ROTATIONS: [D4; 4] = [D4::R0, D4::R90, D4::R180, D4::R270];

/// Mean logits over the four 90-degree rotations, in fixed order
/// 0, 90, 180, 270.
pub fn tta_predict<F>(img: &ImagePatch, forward: F) -> Result<[f32; 2]>
where
    F: Fn(&ImagePatch) -> Result<[f32; 2]>,
{
    tta_predict_with(img, &TTA_ROTATIONS, forward)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub balanced_accuracy: f64,
    pub per_domain: BTreeMap<String, f64>,
    pub n: u64,
}

impl EvalReport {
    pub fn new(confusion: Confusion, per_domain: BTreeMap<String, f64>) -> Result<EvalReport> {
        let balanced = balanced_accuracy(&confusion)?;
        let n = confusion.iter().flatten().sum();
        Ok(EvalReport {
            confusion,
            balanced_accuracy: balanced,
            per_domain,
            n,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("report: {e}")))
    }
}
