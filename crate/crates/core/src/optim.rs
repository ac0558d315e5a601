//! Adam optimizer with a linear-warmup / inverse-square-root schedule.
//!
//! State is kept per parameter block (first and second moment buffers plus a
//! shared step counter) so it can be checkpointed and restored exactly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    /// Learning rate reached exactly at the end of warmup.
    pub base_lr: f64,
    /// Steps of linear warmup; after this the rate decays as `1/sqrt(step)`.
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 2e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Learning rate at 1-based step `t`:
/// `base_lr · min(t / warmup, sqrt(warmup / t))`, peaking at `t == warmup`.
pub fn lr_at(cfg: &AdamConfig, t: u64) -> f64 {
    assert!(t >= 1, "schedule steps are 1-based");
    let t = t as f64;
    let w = cfg.warmup_steps.max(1) as f64;
    cfg.base_lr * (t / w).min((w / t).sqrt())
}

/// Adam state across all parameter blocks of a model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Completed update steps.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, block_sizes: &[usize]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update across every `(parameters, gradient)` pair, in the
    /// same block order the state was created with. Returns the learning rate
    /// that was used.
    pub fn step(&mut self, blocks: &mut [(&mut [f64], &[f64])]) -> Result<f64> {
        if blocks.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer has {} blocks, update has {}",
                self.m.len(),
                blocks.len()
            )));
        }
        self.step += 1;
        let t = self.step;
        let lr = lr_at(&self.cfg, t);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let bc1 = 1.0 - b1.powf(t as f64);
        let bc2 = 1.0 - b2.powf(t as f64);
        for (i, (params, grad)) in blocks.iter_mut().enumerate() {
            if params.len() != self.m[i].len() || grad.len() != self.m[i].len() {
                return Err(Error::Shape(format!(
                    "optimizer block {i}: state {} vs params {} vs grad {}",
                    self.m[i].len(),
                    params.len(),
                    grad.len()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..params.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                params[j] -= lr * mhat / (vhat.sqrt() + eps);
                if !params[j].is_finite() {
                    return Err(Error::Numeric(format!(
                        "optimizer produced a non-finite parameter in block {i}"
                    )));
                }
            }
        }
        Ok(lr)
    }
}
