use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{batch_objective, prepare_window, sample_context_mask, ObjectiveContext, PreparedWindow};
use super::optim::{adamw_step, clip_grad_norm, OptimConfig, OptimState};
use crate::backbone::{ModelState, TokenLayout};
use crate::error::{AmeError, Result};
use crate::metrics::usage_entropy;
use crate::parallel::par_map;
use crate::regime::RegimeSource;
use crate::scalar::Scalar;
use crate::series::{NormStats, Series, Window, SCALE_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub context_len: usize,
    pub horizon_len: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            context_len: 64,
            horizon_len: 16,
            seed: 0,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.horizon_len == 0 || self.context_len < crate::regime::MIN_INPUT {
            return Err(AmeError::invalid(format!(
                "batch_size and horizon_len must be positive and context_len at least {}",
                crate::regime::MIN_INPUT
            )));
        }
        self.optim.validate()
    }
}

/// One JSONL record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_total: f64,
    pub l_task: f64,
    pub l_prior: f64,
    pub l_ortho: f64,
    pub l_balance: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Normalized entropy of top-1 usage, averaged over layers.
    pub expert_usage_entropy: f64,
    /// Largest top-1 share of any expert at the last layer.
    pub max_expert_share: f64,
    /// Mean `KL(p || q)` at the last layer.
    pub last_layer_kl: f64,
}

/// Generator of step `step`. Every step owns an independent stream, so any
/// step can be replayed without the ones before it.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Attempts at finding a window with a non-flat context before accepting
/// whatever was drawn last.
pub const MAX_REDRAWS: usize = 32;

fn flat_context(variates: &[Vec<f64>], off: usize, len: usize) -> bool {
    variates.iter().any(|v| {
        let c = &v[off..off + len];
        NormStats::from_context(&[c.to_vec()]).scale[0] <= SCALE_FLOOR
    })
}

/// Windows and context masks of one step, before profiling. Windows whose
/// context is flat in some variate are redrawn.
pub fn sample_windows(
    dataset: &[Series<f64>],
    cfg: &TrainConfig,
    mask_range: [f64; 2],
    patch_len: usize,
    step: usize,
) -> Result<Vec<(Window<f64>, Vec<Vec<bool>>)>> {
    let need = cfg.context_len + cfg.horizon_len;
    let eligible: Vec<&Series<f64>> = dataset.iter().filter(|s| s.len() >= need).collect();
    if eligible.is_empty() {
        return Err(AmeError::InsufficientData(format!("no series has {need} values")));
    }
    let mut rng = step_rng(cfg.seed, step);
    let n_ctx = TokenLayout::new(1, cfg.context_len, cfg.horizon_len, patch_len).context_tokens();
    (0..cfg.batch_size)
        .map(|_| {
            let mut draw = || {
                let s = eligible[rng.random_range(0..eligible.len())];
                let off = rng.random_range(0..=s.len() - need);
                (s, off)
            };
            let (mut s, mut off) = draw();
            // a flat context standardizes with the scale floor, which turns
            // any horizon movement into an enormous target
            for _ in 1..MAX_REDRAWS {
                if !flat_context(&s.variates, off, cfg.context_len) {
                    break;
                }
                (s, off) = draw();
            }
            let w = Window::at(s, off, cfg.context_len, cfg.horizon_len)?;
            let mask = sample_context_mask(s.n_variates(), n_ctx, mask_range, &mut rng);
            Ok((w, mask))
        })
        .collect()
}

/// Profile every variate's context and embed the windows.
pub fn prepare_batch<T: Scalar>(
    model: &ModelState<T>,
    windows: &[(Window<f64>, Vec<Vec<bool>>)],
    source: &RegimeSource,
) -> Result<Vec<PreparedWindow<T>>> {
    par_map(windows, |(w, mask)| {
        let profiles = w.context.iter().map(|c| source.profile(c)).collect::<Result<Vec<_>>>()?;
        prepare_window(model, w, &profiles, Some(mask))
    })
    .into_iter()
    .collect()
}

/// Batch of step `step`, fully determined by the seed and the step index.
pub fn step_batch<T: Scalar>(
    model: &ModelState<T>,
    dataset: &[Series<f64>],
    cfg: &TrainConfig,
    ctx: &ObjectiveContext<'_>,
    source: &RegimeSource,
    step: usize,
) -> Result<Vec<PreparedWindow<T>>> {
    let raw = sample_windows(dataset, cfg, ctx.loss.mask_ratio_range, model.config.patch_len, step)?;
    prepare_batch(model, &raw, source)
}

/// One optimization step on a prepared batch.
pub fn train_step<T: Scalar>(
    model: &mut ModelState<T>,
    opt: &mut OptimState<T>,
    batch: &[PreparedWindow<T>],
    ctx: &ObjectiveContext<'_>,
    cfg: &TrainConfig,
) -> Result<StepLog> {
    let step = opt.step;
    let out = batch_objective(model, batch, ctx, None, true)?;
    let p = out.parts;
    if !p.total.is_finite() {
        return Err(AmeError::Divergence { step });
    }
    let mut grads = out.grads.expect("gradients requested");
    let grad_norm = clip_grad_norm(&mut grads, cfg.optim.clip_norm, ctx.gate_learnable);
    if !grad_norm.is_finite() {
        return Err(AmeError::Divergence { step });
    }
    let lr = cfg.optim.lr_at(step, cfg.steps);
    adamw_step(model, &grads, opt, &cfg.optim, lr, ctx.gate_learnable);
    let usage = &out.stats.usage;
    let entropy = if usage.is_empty() {
        1.0
    } else {
        usage.iter().map(|u| usage_entropy(u)).sum::<f64>() / usage.len() as f64
    };
    let max_share = usage.last().map_or(1.0, |u| {
        let n: usize = u.iter().sum();
        *u.iter().max().unwrap_or(&0) as f64 / n.max(1) as f64
    });
    Ok(StepLog {
        step,
        l_total: p.total.f64(),
        l_task: p.task.f64(),
        l_prior: p.prior.f64(),
        l_ortho: p.ortho.f64(),
        l_balance: p.balance.f64(),
        grad_norm,
        lr,
        expert_usage_entropy: entropy,
        max_expert_share: max_share,
        last_layer_kl: out.stats.last_layer_kl,
    })
}

/// Run from `opt.step` up to `cfg.steps`, calling `on_step` after every
/// update.
pub fn train<T: Scalar>(
    model: &mut ModelState<T>,
    opt: &mut OptimState<T>,
    dataset: &[Series<f64>],
    cfg: &TrainConfig,
    ctx: &ObjectiveContext<'_>,
    source: &RegimeSource,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    ctx.loss.validate()?;
    if dataset.is_empty() {
        return Err(AmeError::EmptyDataset);
    }
    let mut logs = Vec::with_capacity(cfg.steps.saturating_sub(opt.step));
    while opt.step < cfg.steps {
        let batch = step_batch(model, dataset, cfg, ctx, source, opt.step)?;
        let log = train_step(model, opt, &batch, ctx, cfg)?;
        on_step(&log)?;
        logs.push(log);
    }
    Ok(logs)
}
