//! AdamW with decoupled weight decay, a warmup-cosine learning-rate
//! schedule, and global gradient-norm clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub warmup_frac: f64,
    pub warmup_start_lr: f64,
    pub final_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            weight_decay: 0.1,
            eps: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 1.0,
            warmup_frac: 0.10,
            warmup_start_lr: 8.47e-7,
            final_lr: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!(
                "warmup_frac {} must be in (0,1)",
                self.warmup_frac
            )));
        }
        if self.warmup_start_lr > self.base_lr {
            return Err(Error::Config(format!(
                "warmup_start_lr {} exceeds base_lr {}",
                self.warmup_start_lr, self.base_lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} must be in [0,1)")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "clip_norm {} must be positive",
                self.clip_norm
            )));
        }
        if self.final_lr < 0.0 || self.base_lr <= 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of warmup steps for a run of `total_steps`.
    pub fn warmup_steps(&self, total_steps: u64) -> u64 {
        (self.warmup_frac * total_steps as f64).ceil() as u64
    }
}

/// Learning rate at optimizer step `t` of a `total_steps`-step run: linear
/// from `warmup_start_lr` to `base_lr` over the first ceil(warmup_frac * T)
/// steps, then cosine from `base_lr` down to `final_lr`. Evaluated in f64 so
/// the endpoints are exact.
pub fn lr_at_step(t: u64, total_steps: u64, cfg: &OptimConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Contract("schedule needs at least one step".into()));
    }
    if t > total_steps {
        return Err(Error::Contract(format!(
            "step {t} beyond schedule end {total_steps}"
        )));
    }
    let base = cfg.base_lr;
    let start = cfg.warmup_start_lr;
    let finish = cfg.final_lr;
    let warmup = cfg.warmup_steps(total_steps);
    if t < warmup {
        return Ok(start + (base - start) * t as f64 / warmup as f64);
    }
    if t == warmup {
        return Ok(base);
    }
    let progress = (t - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(finish + (base - finish) * 0.5 * (1.0 + libm::cos(std::f64::consts::PI * progress)))
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the applied scale (1.0 when already within the bound).
pub fn clip_grad_norm(params: &[Tensor], max_norm: f32) -> Result<f32> {
    let mut sq_sum = 0.0f64;
    for (idx, p) in params.iter().enumerate() {
        if let Some(g) = p.grad() {
            for &v in &g {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter {idx} (shape {:?})",
                        p.shape()
                    )));
                }
                sq_sum += f64::from(v) * f64::from(v);
            }
        }
    }
    let norm = sq_sum.sqrt();
    if norm <= f64::from(max_norm) {
        return Ok(1.0);
    }
    let scale = (f64::from(max_norm) / norm) as f32;
    for p in params {
        p.update_grad(|g| {
            for v in g.iter_mut() {
                *v *= scale;
            }
        });
    }
    Ok(scale)
}

/// First/second moment buffers plus the shared step counter.
pub struct OptimState {
    moments: HashMap<u64, (Vec<f32>, Vec<f32>)>,
    t: u64,
}

impl Default for OptimState {
    fn default() -> Self {
        Self::new()
    }
}

impl OptimState {
    pub fn new() -> OptimState {
        OptimState {
            moments: HashMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One AdamW update over every parameter that currently holds a gradient:
/// moment updates, bias correction, then the decoupled decay
/// theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta.
pub fn adamw_step(
    params: &[Tensor],
    state: &mut OptimState,
    lr: f32,
    cfg: &OptimConfig,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::Contract(format!("negative learning rate {lr}")));
    }
    state.t += 1;
    let bc1 = 1.0 - libm::pow(cfg.beta1, state.t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, state.t as f64);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let (eps, wd) = (cfg.eps as f32, cfg.weight_decay as f32);
    for p in params {
        let Some(g) = p.grad() else { continue };
        let numel = p.numel();
        if g.len() != numel {
            return Err(Error::Dim(format!(
                "gradient length {} != parameter length {numel}",
                g.len()
            )));
        }
        let (m, v) = state
            .moments
            .entry(p.uid())
            .or_insert_with(|| (vec![0.0; numel], vec![0.0; numel]));
        if m.len() != numel {
            return Err(Error::Dim(format!(
                "stale moment buffer of length {} for parameter of length {numel}",
                m.len()
            )));
        }
        p.update_data(|theta| {
            for i in 0..numel {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = (f64::from(m[i]) / bc1) as f32;
                let vhat = (f64::from(v[i]) / bc2) as f32;
                theta[i] -= lr * mhat / (vhat.sqrt() + eps) + lr * wd * theta[i];
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn schedule_hits_paper_endpoints() {
        let cfg = OptimConfig::default();
        let base = cfg.base_lr;
        assert_eq!(lr_at_step(0, 100, &cfg).unwrap(), cfg.warmup_start_lr);
        assert_eq!(lr_at_step(10, 100, &cfg).unwrap(), base);
        assert!(close(lr_at_step(55, 100, &cfg).unwrap(), base / 2.0, 1e-12));
        assert_eq!(lr_at_step(100, 100, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn schedule_is_continuous_and_decays_after_warmup() {
        let cfg = OptimConfig::default();
        let total = 137;
        let warmup = cfg.warmup_steps(total);
        let base = cfg.base_lr;
        let at_junction = lr_at_step(warmup, total, &cfg).unwrap();
        assert!((at_junction - base).abs() / base <= 1e-12);
        let mut prev = at_junction;
        for t in warmup + 1..=total {
            let lr = lr_at_step(t, total, &cfg).unwrap();
            assert!(lr <= prev + 1e-18, "lr rose at step {t}");
            prev = lr;
        }
    }

    #[test]
    fn schedule_rejects_steps_past_the_end() {
        let cfg = OptimConfig::default();
        assert!(matches!(
            lr_at_step(101, 100, &cfg),
            Err(Error::Contract(_))
        ));
        assert!(matches!(lr_at_step(0, 0, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn clip_scales_to_unit_norm() {
        let p = Tensor::zeros(&[2]).with_requires_grad(true);
        let mut g = crate::tensor::Graph::new();
        let sq = g.mul(&p, &p).unwrap();
        let loss = g.sum(&sq);
        g.backward(&loss).unwrap();
        p.update_grad(|gr| gr.copy_from_slice(&[3.0, 4.0]));

        let scale = clip_grad_norm(std::slice::from_ref(&p), 1.0).unwrap();
        assert!((scale - 0.2).abs() <= 1e-7);
        let clipped = p.grad().unwrap();
        assert!((clipped[0] - 0.6).abs() <= 1e-6);
        assert!((clipped[1] - 0.8).abs() <= 1e-6);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let p = make_param(&[0.3, 0.4]);
        let scale = clip_grad_norm(std::slice::from_ref(&p), 1.0).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(p.grad().unwrap(), vec![0.3, 0.4]);
    }

    #[test]
    fn clip_is_idempotent() {
        let p = make_param(&[5.0, -2.0, 7.5, 0.25]);
        clip_grad_norm(std::slice::from_ref(&p), 1.0).unwrap();
        let once = p.grad().unwrap();
        let norm: f64 = once.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        assert!(norm <= 1.0 + 1e-6);
        clip_grad_norm(std::slice::from_ref(&p), 1.0).unwrap();
        let twice = p.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn clip_reports_non_finite_gradients() {
        let p = make_param(&[1.0, f32::NAN]);
        let err = clip_grad_norm(std::slice::from_ref(&p), 1.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("parameter 0"));
    }

    fn make_param(grad: &[f32]) -> Tensor {
        let p = Tensor::zeros(&[grad.len()]).with_requires_grad(true);
        let mut g = crate::tensor::Graph::new();
        let sq = g.mul(&p, &p).unwrap();
        let loss = g.sum(&sq);
        g.backward(&loss).unwrap();
        p.update_grad(|gr| gr.copy_from_slice(grad));
        p
    }

    fn param_with_value_and_grad(value: f32, grad: f32) -> Tensor {
        let p = make_param(&[grad]);
        p.update_data(|d| d[0] = value);
        p
    }

    #[test]
    fn adamw_first_step_hand_value() {
        let cfg = OptimConfig {
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        let p = param_with_value_and_grad(1.0, 0.5);
        let mut state = OptimState::new();
        adamw_step(std::slice::from_ref(&p), &mut state, 0.1, &cfg).unwrap();
        let theta = p.to_vec()[0];
        assert!((theta - 0.8900).abs() <= 1e-4, "theta {theta}");
    }

    #[test]
    fn adamw_zero_grad_fresh_state_is_pure_decay() {
        let cfg = OptimConfig::default();
        let p = param_with_value_and_grad(2.0, 0.0);
        let mut state = OptimState::new();
        adamw_step(std::slice::from_ref(&p), &mut state, 0.1, &cfg).unwrap();
        let expected = 2.0 * (1.0 - 0.1 * cfg.weight_decay as f32);
        assert!((p.to_vec()[0] - expected).abs() <= 1e-6);

        let no_decay = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let q = param_with_value_and_grad(2.0, 0.0);
        let mut state = OptimState::new();
        adamw_step(std::slice::from_ref(&q), &mut state, 0.1, &no_decay).unwrap();
        assert_eq!(q.to_vec()[0], 2.0);
    }

    #[test]
    fn adamw_without_decay_matches_adam_oracle() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            eps: 1e-7,
            ..OptimConfig::default()
        };
        let grads = [0.5f32, -0.3, 0.8, 0.1, -0.6, 0.4, 0.9, -0.2, 0.7, -0.5];
        let p = param_with_value_and_grad(1.0, 0.0);
        let mut state = OptimState::new();
        let lr = 0.01f64;

        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            p.update_grad(|gr| gr[0] = g);
            adamw_step(std::slice::from_ref(&p), &mut state, lr as f32, &cfg).unwrap();

            let gf = f64::from(g);
            m = 0.9 * m + 0.1 * gf;
            v = 0.999 * v + 0.001 * gf * gf;
            let t = i as i32 + 1;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * mhat / (vhat.sqrt() + 1e-7);

            assert!(
                (f64::from(p.to_vec()[0]) - theta).abs() <= 1e-6,
                "step {t}: {} vs {theta}",
                p.to_vec()[0]
            );
        }
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let p = param_with_value_and_grad(1.0, 0.0);
        let mut state = OptimState::new();
        for _ in 0..200 {
            let g = 2.0 * p.to_vec()[0];
            p.update_grad(|gr| gr[0] = g);
            adamw_step(std::slice::from_ref(&p), &mut state, 0.05, &cfg).unwrap();
        }
        assert!(p.to_vec()[0].abs() < 0.1, "theta {}", p.to_vec()[0]);
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = OptimConfig::default();
        cfg.warmup_frac = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg = OptimConfig::default();
        cfg.beta2 = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg = OptimConfig::default();
        cfg.warmup_start_lr = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(OptimConfig::default().validate().is_ok());
    }
}
