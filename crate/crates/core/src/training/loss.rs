use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::RoutingRecord;
use crate::error::{AmeError, Result};
use crate::prior::{AnchorMap, ExpertPrior};
use crate::scalar::Scalar;

/// Smoothing applied to the prior before any KL term.
pub const PRIOR_SMOOTHING: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(p || q)` with `p` the router distribution.
    #[default]
    Forward,
    /// `KL(q || p)`.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlTokens {
    #[default]
    AllTokens,
    ObservedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_prior: f64,
    pub lambda_ortho: f64,
    pub lambda_max: f64,
    pub kl_direction: KlDirection,
    /// Share of context tokens hidden per window, drawn uniformly.
    pub mask_ratio_range: [f64; 2],
    pub apply_kl_to: KlTokens,
    /// Importance-times-usage balancing weight; zero disables it.
    pub load_balance: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_prior: 0.1,
            lambda_ortho: 0.01,
            lambda_max: 1.0,
            kl_direction: KlDirection::Forward,
            mask_ratio_range: [0.15, 0.5],
            apply_kl_to: KlTokens::AllTokens,
            load_balance: 0.0,
        }
    }
}

impl LossConfig {
    /// The plain sparse-MoE objective: task loss only.
    pub fn task_only() -> Self {
        LossConfig {
            lambda_prior: 0.0,
            lambda_ortho: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_prior, self.lambda_ortho, self.lambda_max, self.load_balance];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(AmeError::invalid("loss weights must be finite and non-negative"));
        }
        let [lo, hi] = self.mask_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(AmeError::invalid("mask_ratio_range must satisfy 0 < low <= high < 1"));
        }
        Ok(())
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn count_valid(valid: &[Vec<bool>]) -> usize {
    valid.iter().flatten().filter(|&&v| v).count()
}

/// Mean absolute error over the valid positions.
pub fn task_loss<T: Scalar>(pred: &Array2<T>, target: &Array2<T>, valid: &[Vec<bool>]) -> Result<T> {
    task_loss_grad(pred, target, valid, None).map(|(l, _)| l)
}

/// Sum of absolute errors over valid positions divided by `denom` (their
/// count when `None`), plus the gradient with respect to `pred`.
pub fn task_loss_grad<T: Scalar>(
    pred: &Array2<T>,
    target: &Array2<T>,
    valid: &[Vec<bool>],
    denom: Option<usize>,
) -> Result<(T, Array2<T>)> {
    if pred.dim() != target.dim() || valid.len() != pred.nrows() {
        return Err(AmeError::Shape("prediction, target and mask differ".into()));
    }
    let n = denom.unwrap_or_else(|| count_valid(valid));
    if n == 0 {
        return Err(AmeError::NoValidPositions);
    }
    let inv = T::one() / T::from_usize_lossy(n);
    let mut grad = Array2::zeros(pred.dim());
    let mut sum = T::zero();
    for ((r, c), &p) in pred.indexed_iter() {
        if valid[r].get(c).copied().unwrap_or(false) {
            let e = p - target[[r, c]];
            sum += e.abs();
            grad[[r, c]] = sign(e) * inv;
        }
    }
    Ok((sum * inv, grad))
}

/// `lambda_max * l / (N_L - 1)` for `l = 0..N_L`; a single layer gets
/// `lambda_max`.
pub fn layer_weights<T: Scalar>(n_layers: usize, lambda_max: T) -> Vec<T> {
    match n_layers {
        0 => Vec::new(),
        1 => vec![lambda_max],
        n => (0..n)
            .map(|l| lambda_max * T::from_usize_lossy(l) / T::from_usize_lossy(n - 1))
            .collect(),
    }
}

/// `(q + ε) / (1 + Eε)`.
pub fn smooth_prior<T: Scalar>(q: &[T]) -> Vec<T> {
    let eps = T::c(PRIOR_SMOOTHING);
    let z = T::one() + eps * T::from_usize_lossy(q.len());
    q.iter().map(|&v| (v + eps) / z).collect()
}

/// KL divergence between a router distribution `p` and a smoothed prior
/// `q`, with `0 log 0 = 0`.
pub fn kl<T: Scalar>(p: &[T], q: &[T], dir: KlDirection) -> T {
    let term = |a: T, b: T| if a > T::zero() { a * (a / b).ln() } else { T::zero() };
    match dir {
        KlDirection::Forward => p.iter().zip(q).map(|(&a, &b)| term(a, b)).sum(),
        KlDirection::Reverse => q.iter().zip(p).map(|(&a, &b)| term(a, b)).sum(),
    }
}

/// Gradient of [`kl`] with respect to the router logits behind `p`.
pub fn kl_logit_grad<T: Scalar>(p: &[T], q: &[T], dir: KlDirection) -> Vec<T> {
    match dir {
        KlDirection::Forward => {
            let k = kl(p, q, dir);
            p.iter()
                .zip(q)
                .map(|(&a, &b)| if a > T::zero() { a * ((a / b).ln() - k) } else { T::zero() })
                .collect()
        }
        KlDirection::Reverse => {
            let sq: T = q.iter().copied().sum();
            p.iter().zip(q).map(|(&a, &b)| a * sq - b).collect()
        }
    }
}

/// Gradient of [`kl`] with respect to the smoothed prior `q`.
pub fn kl_prior_grad<T: Scalar>(p: &[T], q: &[T], dir: KlDirection) -> Vec<T> {
    match dir {
        KlDirection::Forward => p.iter().zip(q).map(|(&a, &b)| -a / b).collect(),
        KlDirection::Reverse => p.iter().zip(q).map(|(&a, &b)| (b / a).ln() + T::one()).collect(),
    }
}

/// `(1/N_L) Σ_l λ_l mean_t KL(p_l(t) || q(t))` over the tokens in `include`.
/// `q_tokens` holds the smoothed prior of each token's variate.
pub fn prior_alignment_loss<T: Scalar>(
    records: &[RoutingRecord<T>],
    q_tokens: &Array2<T>,
    weights: &[T],
    dir: KlDirection,
    include: &[bool],
) -> Result<T> {
    if records.len() != weights.len() {
        return Err(AmeError::LayerMismatch {
            expected: weights.len(),
            got: records.len(),
        });
    }
    if records.is_empty() {
        return Ok(T::zero());
    }
    let n = include.iter().filter(|&&b| b).count();
    if n == 0 {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for (rec, &w) in records.iter().zip(weights) {
        let mut s = T::zero();
        for t in (0..rec.n_tokens()).filter(|&t| include[t]) {
            let p = rec.probs.row(t).to_vec();
            let q = q_tokens.row(t).to_vec();
            s += kl(&p, &q, dir);
        }
        total += w * s / T::from_usize_lossy(n);
    }
    Ok(total / T::from_usize_lossy(records.len()))
}

/// Broadcast each variate's smoothed prior to its tokens.
pub fn prior_per_token<T: Scalar>(variate_id: &[usize], priors: &[ExpertPrior<T>]) -> Array2<T> {
    let smoothed: Vec<Vec<T>> = priors.iter().map(|q| smooth_prior(&q.probs)).collect();
    let e = smoothed.first().map_or(0, Vec::len);
    Array2::from_shape_fn((variate_id.len(), e), |(t, j)| smoothed[variate_id[t]][j])
}

fn unit<T: Scalar>(h: &[T]) -> (Vec<T>, T) {
    let norm = h.iter().map(|&v| v * v).sum::<T>().sqrt();
    let safe = norm.max(T::min_positive_value());
    (h.iter().map(|&v| v / safe).collect(), safe)
}

/// Co-activated pairs `(slot_i, slot_j)` of one token whose experts are
/// anchored to the same descriptor.
pub fn same_group_pairs(selected: &[usize], map: &AnchorMap) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..selected.len() {
        for j in i + 1..selected.len() {
            let (a, b) = (map.descriptor_of(selected[i]), map.descriptor_of(selected[j]));
            if a.is_some() && a == b {
                out.push((i, j));
            }
        }
    }
    out
}

/// `|<h_i/|h_i|, h_j/|h_j|>|` and its gradients with respect to `h_i` and
/// `h_j`.
pub fn abs_cosine_grad<T: Scalar>(hi: &[T], hj: &[T]) -> (T, Vec<T>, Vec<T>) {
    let (ui, ni) = unit(hi);
    let (uj, nj) = unit(hj);
    let c: T = ui.iter().zip(&uj).map(|(&a, &b)| a * b).sum();
    let s = sign(c);
    let gi = ui.iter().zip(&uj).map(|(&a, &b)| s * (b - c * a) / ni).collect();
    let gj = uj.iter().zip(&ui).map(|(&a, &b)| s * (b - c * a) / nj).collect();
    (c.abs(), gi, gj)
}

/// Mean `|cos|` over every qualifying pair; zero when there is none.
/// `outputs[t]` lists the expert outputs of token `t` in selection order.
pub fn orthogonality_loss<T: Scalar>(selected: &[Vec<usize>], outputs: &[Vec<Vec<T>>], map: &AnchorMap) -> T {
    let mut sum = T::zero();
    let mut n = 0usize;
    for (sel, outs) in selected.iter().zip(outputs) {
        for (i, j) in same_group_pairs(sel, map) {
            sum += abs_cosine_grad(&outs[i], &outs[j]).0;
            n += 1;
        }
    }
    if n == 0 {
        T::zero()
    } else {
        sum / T::from_usize_lossy(n)
    }
}

/// Importance-times-usage balancing term `E Σ_e f_e P_e` for one layer,
/// with `f` the top-1 share (held constant) and `P` the mean probability.
pub fn load_balance_loss<T: Scalar>(rec: &RoutingRecord<T>) -> T {
    let (f, p) = balance_terms(rec);
    let e = T::from_usize_lossy(rec.n_experts());
    e * f.iter().zip(&p).map(|(&a, &b)| a * b).sum::<T>()
}

pub(crate) fn balance_terms<T: Scalar>(rec: &RoutingRecord<T>) -> (Vec<T>, Vec<T>) {
    let n = rec.n_tokens();
    let e = rec.n_experts();
    let mut f = vec![T::zero(); e];
    let mut p = vec![T::zero(); e];
    let inv = T::one() / T::from_usize_lossy(n.max(1));
    for t in 0..n {
        f[rec.top1(t)] += inv;
        for j in 0..e {
            p[j] += rec.probs[[t, j]] * inv;
        }
    }
    (f, p)
}
