//! Focal loss for the imbalanced binary task, fused with its softmax so the
//! whole loss is one graph node with an analytic backward rule.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha: f32,
    pub gamma: f32,
    pub positive_class: usize,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.25,
            gamma: 2.0,
            positive_class: 1,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "focal alpha {} must be in (0,1)",
                self.alpha
            )));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "focal gamma {} must be non-negative",
                self.gamma
            )));
        }
        if self.positive_class > 1 {
            return Err(Error::Config(format!(
                "positive_class {} must be 0 or 1",
                self.positive_class
            )));
        }
        Ok(())
    }
}

/// Mean over the batch of -alpha_t * (1 - p_t)^gamma * ln(p_t), where p_t is
/// the softmax probability of the true class and alpha_t is `alpha` for the
/// positive class and `1 - alpha` otherwise.
pub fn focal_loss(
    graph: &mut Graph,
    logits: &Tensor,
    labels: &[u8],
    cfg: &FocalConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::Dim(format!(
            "focal_loss expects [batch x 2] logits, got {shape:?}"
        )));
    }
    let batch = shape[0];
    if labels.len() != batch {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("label {bad} outside {{0,1}}")));
    }

    let gamma = cfg.gamma;
    let mut probs = vec![0.0f32; batch * 2];
    let mut pt = vec![0.0f32; batch];
    let mut ln_pt = vec![0.0f32; batch];
    let mut alpha_t = vec![0.0f32; batch];
    let mut total = 0.0f32;
    {
        let ld = logits.data();
        for (i, &label) in labels.iter().enumerate() {
            let (l0, l1) = (ld[i * 2], ld[i * 2 + 1]);
            let m = l0.max(l1);
            let e0 = libm::expf(l0 - m);
            let e1 = libm::expf(l1 - m);
            let z = e0 + e1;
            probs[i * 2] = e0 / z;
            probs[i * 2 + 1] = e1 / z;
            let y = label as usize;
            pt[i] = probs[i * 2 + y];
            ln_pt[i] = (ld[i * 2 + y] - m) - libm::logf(z);
            alpha_t[i] = if y == cfg.positive_class {
                cfg.alpha
            } else {
                1.0 - cfg.alpha
            };
            total += -alpha_t[i] * libm::powf(1.0 - pt[i], gamma) * ln_pt[i];
        }
    }
    let out = Tensor::scalar(total / batch as f32);

    let logits_c = logits.clone();
    let out_c = out.clone();
    let labels_c: Vec<u8> = labels.to_vec();
    graph.push(logits.requires_grad(), &out, move |store| {
        if let Some(g) = store.grad_of(&out_c).map(<[f32]>::to_vec) {
            let upstream = g[0] / batch as f32;
            let mut dl = vec![0.0f32; batch * 2];
            for (i, &label) in labels_c.iter().enumerate() {
                let y = label as usize;
                let g1 = 1.0 - pt[i];
                // dL/dp_t, with the gamma term dropped where it vanishes in
                // the limit (gamma = 0, or p_t = 1).
                let shaping = if gamma == 0.0 || ln_pt[i] == 0.0 {
                    0.0
                } else {
                    gamma * libm::powf(g1, gamma - 1.0) * ln_pt[i]
                };
                let dldpt = alpha_t[i] * (shaping - libm::powf(g1, gamma) / pt[i]);
                for j in 0..2 {
                    let delta = if j == y { 1.0 } else { 0.0 };
                    dl[i * 2 + j] = upstream * dldpt * pt[i] * (delta - probs[i * 2 + j]);
                }
            }
            store.accumulate(&logits_c, &dl);
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::grad_check;

    fn scalar_loss(logits: Vec<f32>, labels: &[u8], cfg: &FocalConfig) -> f32 {
        let mut g = Graph::no_grad();
        let t = Tensor::from_vec(logits, &[labels.len(), 2]).unwrap();
        focal_loss(&mut g, &t, labels, cfg).unwrap().item().unwrap()
    }

    #[test]
    fn reduces_to_cross_entropy_at_gamma_zero() {
        let cfg = FocalConfig {
            alpha: 0.5,
            gamma: 0.0,
            positive_class: 1,
        };
        // alpha_t is 0.5 for both classes, so twice the loss is plain CE.
        let loss = scalar_loss(vec![0.0, 0.0], &[1], &cfg);
        assert!((2.0 * loss - std::f32::consts::LN_2).abs() <= 1e-7);

        let mut s = RngStream::for_purpose(5, "test-focal-ce");
        let logits: Vec<f32> = (0..16).map(|_| s.normal()).collect();
        let labels: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
        let focal = scalar_loss(logits.clone(), &labels, &cfg);
        let mut ce = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let (l0, l1) = (f64::from(logits[i * 2]), f64::from(logits[i * 2 + 1]));
            let m = l0.max(l1);
            let z = ((l0 - m).exp() + (l1 - m).exp()).ln() + m;
            let ly = if y == 0 { l0 } else { l1 };
            ce += z - ly;
        }
        ce /= labels.len() as f64;
        assert!(
            (f64::from(2.0 * focal) - ce).abs() <= 1e-6,
            "2*focal {} vs ce {ce}",
            2.0 * focal
        );
    }

    #[test]
    fn confident_correct_prediction_gives_near_zero_loss() {
        let cfg = FocalConfig::default();
        let loss = scalar_loss(vec![-20.0, 20.0], &[1], &cfg);
        assert!(loss.abs() <= 1e-6, "loss {loss}");
    }

    #[test]
    fn hand_value_at_pt_09() {
        let cfg = FocalConfig::default();
        // logits [0, ln 9] put the positive-class probability at 0.9
        let loss = scalar_loss(vec![0.0, (9.0f32).ln()], &[1], &cfg);
        let expected = -0.25 * 0.01 * (0.9f64).ln();
        assert!(
            (f64::from(loss) - expected).abs() <= 1e-9,
            "loss {loss} vs {expected}"
        );
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        let cfg = FocalConfig::default();
        let mut g = Graph::new();
        let t = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
        assert!(matches!(
            focal_loss(&mut g, &t, &[2], &cfg),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            focal_loss(&mut g, &t, &[0, 1], &cfg),
            Err(Error::Contract(_))
        ));
        let bad = Tensor::from_vec(vec![0.0; 6], &[2, 3]).unwrap();
        assert!(matches!(
            focal_loss(&mut g, &bad, &[0, 1], &cfg),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn gamma_two_never_exceeds_gamma_zero_on_easy_batches() {
        let mut s = RngStream::for_purpose(9, "test-focal-easy");
        for trial in 0..50 {
            let batch = 1 + (trial % 7);
            let mut logits = Vec::with_capacity(batch * 2);
            let mut labels = Vec::with_capacity(batch);
            for i in 0..batch {
                let y = (s.below(2)) as u8;
                labels.push(y);
                // true-class logit strictly larger, so p_t > 0.5
                let lo = s.uniform(-2.0, 2.0);
                let margin = s.uniform(0.1, 4.0);
                if y == 0 {
                    logits.extend([lo + margin, lo]);
                } else {
                    logits.extend([lo, lo + margin]);
                }
                let _ = i;
            }
            let sharp = FocalConfig::default();
            let flat = FocalConfig {
                gamma: 0.0,
                ..FocalConfig::default()
            };
            let l2 = scalar_loss(logits.clone(), &labels, &sharp);
            let l0 = scalar_loss(logits, &labels, &flat);
            assert!(l2 <= l0 + 1e-9, "trial {trial}: {l2} > {l0}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_both_gammas() {
        let mut s = RngStream::for_purpose(13, "test-focal-grad");
        for &gamma in &[0.0f32, 2.0] {
            for trial in 0..4 {
                let batch = 3 + trial;
                let labels: Vec<u8> = (0..batch).map(|_| s.below(2) as u8).collect();
                let logits = Tensor::randn(&[batch, 2], 1.5, &mut s);
                let cfg = FocalConfig {
                    gamma,
                    ..FocalConfig::default()
                };
                let labels_ref = labels.clone();
                let err = grad_check(
                    |g, t| focal_loss(g, t, &labels_ref, &cfg),
                    &logits,
                    0.01,
                )
                .unwrap();
                assert!(err <= 1e-3, "gamma {gamma} trial {trial}: rel err {err}");
            }
        }
    }

    #[test]
    fn loss_trains_toward_correct_labels() {
        let mut s = RngStream::for_purpose(17, "test-focal-descent");
        let logits = Tensor::randn(&[4, 2], 0.1, &mut s).with_requires_grad(true);
        let labels = [0u8, 1, 1, 0];
        let cfg = FocalConfig::default();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..100 {
            let mut g = Graph::new();
            let loss = focal_loss(&mut g, &logits, &labels, &cfg).unwrap();
            last = loss.item().unwrap();
            first.get_or_insert(last);
            g.backward(&loss).unwrap();
            let grad = logits.grad().unwrap();
            logits.update_data(|d| {
                for (w, gr) in d.iter_mut().zip(&grad) {
                    *w -= 0.5 * gr;
                }
            });
            logits.zero_grad();
        }
        assert!(last < 0.1 * first.unwrap(), "{last} vs {first:?}");
        let d = logits.to_vec();
        for (i, &y) in labels.iter().enumerate() {
            let pred = if d[i * 2] >= d[i * 2 + 1] { 0 } else { 1 };
            assert_eq!(pred, y as usize, "sample {i}");
        }
    }
}
