use serde::{Deserialize, Serialize};

use crate::backbone::{ModelState, GATE_TENSOR};
use crate::error::{AmeError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 2.0,
            warmup_steps: 100,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0;
        if !ok {
            return Err(AmeError::invalid("optimizer settings out of range"));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then linear decay towards zero at `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let s = step as f64 + 1.0;
        if step < self.warmup_steps {
            return self.lr * s / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let done = (step - self.warmup_steps) as f64;
        self.lr * (1.0 - done / span).max(0.0)
    }
}

/// Adam moments and the number of applied updates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: ModelState<T>,
    pub v: ModelState<T>,
    pub step: usize,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(model: &ModelState<T>) -> Self {
        OptimState {
            m: model.zeros_like(),
            v: model.zeros_like(),
            step: 0,
        }
    }
}

/// Rescale `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ModelState<T>, max_norm: f64, include_gate: bool) -> f64 {
    let norm = grads.global_norm(include_gate).f64();
    if norm > max_norm {
        grads.scale(T::c(max_norm / norm));
    }
    norm
}

/// One AdamW update with learning rate `lr`. The gate tensor moves only
/// when `gate_learnable`.
pub fn adamw_step<T: Scalar>(
    model: &mut ModelState<T>,
    grads: &ModelState<T>,
    state: &mut OptimState<T>,
    cfg: &OptimConfig,
    lr: f64,
    gate_learnable: bool,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::c(1.0 - cfg.beta1.powi(t));
    let c2 = T::c(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let (lr, eps, wd) = (T::c(lr), T::c(cfg.eps), T::c(cfg.weight_decay));
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.shape.len()).collect();
    let params = model.tensors_mut();
    let g = grads.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    for ((((p, g), m), v), rank) in params.into_iter().zip(g).zip(m).zip(v).zip(shapes) {
        if p.name == GATE_TENSOR && !gate_learnable {
            continue;
        }
        let decay = if rank == 2 { wd } else { T::zero() };
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
            v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
            let upd = (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + eps);
            p.data[i] -= lr * (upd + decay * p.data[i]);
        }
    }
}
