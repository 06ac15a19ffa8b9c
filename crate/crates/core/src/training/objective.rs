use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use super::loss::{
    abs_cosine_grad, balance_terms, kl, kl_logit_grad, kl_prior_grad, layer_weights,
    prior_per_token, same_group_pairs, task_loss_grad, KlDirection, KlTokens, LossConfig, PRIOR_SMOOTHING,
};
use crate::backbone::{
    additive_prior_shift, embed_and_pack, encoder_backward, encoder_forward, horizon_targets, EncoderPass,
    ForwardOptions, LayerExtraGrads, ModelState, PackedSequence, TokenLayout,
};
use crate::descriptors::{Descriptor, RegimeProfile};
use crate::error::Result;
use crate::parallel::par_map;
use crate::prior::{expert_prior_masked, shared_gate_grad, AnchorMap, ExpertPrior};
use crate::scalar::Scalar;
use crate::series::{standardize_window, Window};

/// Everything about the objective that is not a model parameter.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveContext<'a> {
    pub loss: &'a LossConfig,
    /// Descriptor anchoring; `None` disables the prior and orthogonality
    /// terms (dense models).
    pub map: Option<&'a AnchorMap>,
    pub gate_learnable: bool,
    /// Adds `β log(q + ε)` to the router logits (training and inference).
    pub additive_beta: Option<f64>,
    pub drop: Option<Descriptor>,
}

/// A standardized training window with its token mask and regime
/// profiles. Embedding happens inside the objective so every parameter,
/// including the embeddings, is part of the differentiated graph.
#[derive(Debug, Clone)]
pub struct PreparedWindow<T> {
    pub norm: Window<T>,
    pub context_mask: Option<Vec<Vec<bool>>>,
    pub layout: TokenLayout,
    pub targets: Array2<T>,
    pub valid: Vec<Vec<bool>>,
    /// One profile per variate, from the regime source.
    pub profiles: Vec<RegimeProfile<T>>,
}

/// Number of context tokens to hide for a drawn ratio `r`, kept inside
/// `[ceil(low n), floor(high n)]` when that interval is non-empty.
pub fn mask_count(n: usize, r: f64, range: [f64; 2]) -> usize {
    let nf = n as f64;
    let lo = (range[0] * nf).ceil() as usize;
    let hi = (range[1] * nf).floor() as usize;
    let c = (r * nf).round() as usize;
    if lo > hi {
        return c.min(hi);
    }
    c.clamp(lo, hi)
}

/// Per-variate context masks with a uniformly drawn ratio.
pub fn sample_context_mask<R: Rng>(n_variates: usize, n_ctx: usize, range: [f64; 2], rng: &mut R) -> Vec<Vec<bool>> {
    let r = if range[0] < range[1] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    };
    let count = mask_count(n_ctx, r, range);
    (0..n_variates)
        .map(|_| {
            let mut m = vec![false; n_ctx];
            for i in sample(rng, n_ctx, count) {
                m[i] = true;
            }
            m
        })
        .collect()
}

/// Standardize by context statistics, embed and attach normalized targets.
pub fn prepare_window<T: Scalar>(
    model: &ModelState<T>,
    window: &Window<f64>,
    profiles: &[RegimeProfile<f64>],
    context_mask: Option<&[Vec<bool>]>,
) -> Result<PreparedWindow<T>> {
    let cast = |v: &[Vec<f64>]| v.iter().map(|x| x.iter().map(|&a| T::c(a)).collect()).collect();
    let w = Window {
        context: cast(&window.context),
        horizon: cast(&window.horizon),
        source_id: window.source_id.clone(),
        offset: window.offset,
    };
    let (norm, _) = standardize_window(&w);
    // embedding once validates the layout and the mask
    let seq = embed_and_pack(&norm, model, context_mask)?;
    let (targets, valid) = horizon_targets(&seq.layout, &norm.horizon);
    Ok(PreparedWindow {
        norm,
        context_mask: context_mask.map(<[Vec<bool>]>::to_vec),
        layout: seq.layout,
        targets,
        valid,
        profiles: profiles.iter().map(RegimeProfile::cast).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts<T> {
    pub total: T,
    pub task: T,
    pub prior: T,
    pub ortho: T,
    pub balance: T,
}

/// Routing diagnostics gathered during the forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchStats {
    /// `[layer][expert]` top-1 counts over non-padding tokens.
    pub usage: Vec<Vec<usize>>,
    /// Mean `KL(p || q)` at the last layer over the KL token set.
    pub last_layer_kl: f64,
}

pub struct BatchOutput<T> {
    pub parts: LossParts<T>,
    pub grads: Option<ModelState<T>>,
    pub stats: BatchStats,
    /// `[window][layer][token]` selected experts.
    pub routes: Vec<Vec<Vec<Vec<usize>>>>,
}

struct WindowForward<T> {
    seq: PackedSequence<T>,
    pass: EncoderPass<T>,
    priors: Vec<ExpertPrior<T>>,
    q_tok: Array2<T>,
    include: Vec<bool>,
}

fn pairs(selected: &[usize], map: Option<&AnchorMap>) -> Vec<(usize, usize)> {
    map.map_or_else(Vec::new, |m| same_group_pairs(selected, m))
}

fn kl_include<T>(seq: &PackedSequence<T>, which: KlTokens) -> Vec<bool> {
    (0..seq.pad_mask.len())
        .map(|t| !seq.pad_mask[t] && (which == KlTokens::AllTokens || !seq.is_masked[t]))
        .collect()
}

fn window_forward<T: Scalar>(
    model: &ModelState<T>,
    w: &PreparedWindow<T>,
    ctx: &ObjectiveContext<'_>,
    forced: Option<&[Vec<Vec<usize>>]>,
) -> Result<WindowForward<T>> {
    let seq = embed_and_pack(&w.norm, model, w.context_mask.as_deref())?;
    let gate = model.gate_params(ctx.gate_learnable);
    let priors: Vec<ExpertPrior<T>> = w
        .profiles
        .iter()
        .filter_map(|p| ctx.map.map(|m| expert_prior_masked(p, m, &gate, ctx.drop)))
        .collect();
    let shift = ctx
        .additive_beta
        .filter(|_| !priors.is_empty())
        .map(|b| additive_prior_shift(&seq, &priors, T::c(b)));
    let opts = ForwardOptions {
        prior_shift: shift.as_ref(),
        forced,
    };
    let pass = encoder_forward(&seq, model, opts)?;
    let q_tok = prior_per_token(&seq.variate_id, &priors);
    let include = if ctx.map.is_some() {
        kl_include(&seq, ctx.loss.apply_kl_to)
    } else {
        vec![false; seq.n_tokens()]
    };
    Ok(WindowForward {
        seq,
        pass,
        priors,
        q_tok,
        include,
    })
}

/// Shared normalizers of one batch, known only after the forward pass.
struct Norms<T> {
    n_valid: usize,
    n_kl: usize,
    n_pairs: usize,
    layer_w: Vec<T>,
    /// Per layer: top-1 share and mean probability over the whole batch.
    balance: Vec<(Vec<T>, Vec<T>)>,
    n_tokens: usize,
}

/// Full objective over a batch: `task + λ_prior prior + λ_ortho ortho`
/// (plus the optional balancing term), with every mean taken over the whole
/// batch. Gradients are accumulated per window and summed in window order,
/// so the result does not depend on the worker count.
pub fn batch_objective<T: Scalar>(
    model: &ModelState<T>,
    batch: &[PreparedWindow<T>],
    ctx: &ObjectiveContext<'_>,
    forced: Option<&[Vec<Vec<Vec<usize>>>]>,
    want_grads: bool,
) -> Result<BatchOutput<T>> {
    let cfg = ctx.loss;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let fwd = par_map(&idx, |&i| window_forward(model, &batch[i], ctx, forced.map(|f| f[i].as_slice())))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let n_layers = model.config.n_layers;
    let n_exp = model.config.experts_total;
    let n_valid = batch.iter().map(|w| w.valid.iter().flatten().filter(|&&v| v).count()).sum();
    let n_kl = fwd.iter().map(|f| f.include.iter().filter(|&&b| b).count()).sum();
    let n_pairs = fwd
        .iter()
        .map(|f| {
            f.pass
                .records
                .iter()
                .map(|r| r.topk.iter().map(|s| pairs(s, ctx.map).len()).sum::<usize>())
                .sum::<usize>()
        })
        .sum();
    let n_tokens: usize = fwd.iter().map(|f| f.seq.n_tokens()).sum();
    let balance = (0..n_layers)
        .map(|l| {
            let mut f = vec![T::zero(); n_exp];
            let mut p = vec![T::zero(); n_exp];
            for wf in &fwd {
                let share = T::from_usize_lossy(wf.seq.n_tokens()) / T::from_usize_lossy(n_tokens);
                let (fi, pi) = balance_terms(&wf.pass.records[l]);
                for e in 0..n_exp {
                    f[e] += fi[e] * share;
                    p[e] += pi[e] * share;
                }
            }
            (f, p)
        })
        .collect();
    let norms = Norms {
        n_valid,
        n_kl,
        n_pairs,
        layer_w: layer_weights(n_layers, T::c(cfg.lambda_max)),
        balance,
        n_tokens,
    };

    let per_window = par_map(&idx, |&i| window_terms(model, &batch[i], &fwd[i], ctx, &norms, want_grads))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut parts = LossParts::default();
    let mut grads = want_grads.then(|| model.zeros_like());
    let mut stats = BatchStats {
        usage: vec![vec![0; n_exp]; n_layers],
        last_layer_kl: 0.0,
    };
    let mut last_kl = 0.0;
    for (wt, wf) in per_window.into_iter().zip(&fwd) {
        parts.task += wt.task;
        parts.prior += wt.prior;
        parts.ortho += wt.ortho;
        last_kl += wt.last_kl;
        if let (Some(acc), Some(g)) = (grads.as_mut(), wt.grads.as_ref()) {
            acc.add_assign(g);
        }
        for (l, rec) in wf.pass.records.iter().enumerate() {
            for t in 0..rec.n_tokens() {
                stats.usage[l][rec.top1(t)] += 1;
            }
        }
    }
    if cfg.load_balance > 0.0 && n_layers > 0 {
        let e = T::from_usize_lossy(n_exp);
        let s: T = norms
            .balance
            .iter()
            .map(|(f, p)| e * f.iter().zip(p).map(|(&a, &b)| a * b).sum::<T>())
            .sum();
        parts.balance = s / T::from_usize_lossy(n_layers);
    }
    stats.last_layer_kl = if n_kl > 0 { last_kl / n_kl as f64 } else { 0.0 };
    parts.total = parts.task
        + T::c(cfg.lambda_prior) * parts.prior
        + T::c(cfg.lambda_ortho) * parts.ortho
        + T::c(cfg.load_balance) * parts.balance;
    let routes = fwd
        .iter()
        .map(|f| f.pass.records.iter().map(|r| r.topk.clone()).collect())
        .collect();
    Ok(BatchOutput {
        parts,
        grads,
        stats,
        routes,
    })
}

struct WindowTerms<T> {
    task: T,
    prior: T,
    ortho: T,
    last_kl: f64,
    grads: Option<ModelState<T>>,
}

fn window_terms<T: Scalar>(
    model: &ModelState<T>,
    w: &PreparedWindow<T>,
    wf: &WindowForward<T>,
    ctx: &ObjectiveContext<'_>,
    norms: &Norms<T>,
    want_grads: bool,
) -> Result<WindowTerms<T>> {
    let cfg = ctx.loss;
    let n_layers = model.config.n_layers;
    let n_exp = model.config.experts_total;
    let (task, dpred) = task_loss_grad(&wf.pass.predictions, &w.targets, &w.valid, Some(norms.n_valid))?;

    let nl = T::from_usize_lossy(n_layers.max(1));
    let n_kl = T::from_usize_lossy(norms.n_kl.max(1));
    let n_pairs = T::from_usize_lossy(norms.n_pairs.max(1));
    let lp = T::c(cfg.lambda_prior);
    let lo = T::c(cfg.lambda_ortho);
    let lb = T::c(cfg.load_balance);
    let mut prior = T::zero();
    let mut ortho = T::zero();
    let mut last_kl = 0.0;
    let mut extra = Vec::with_capacity(n_layers);
    // dL/dq per variate, for the learnable gate
    let mut dq = vec![vec![T::zero(); n_exp]; w.profiles.len()];
    let q_scale = T::one() / (T::one() + T::c(PRIOR_SMOOTHING) * T::from_usize_lossy(n_exp));
    for (l, rec) in wf.pass.records.iter().enumerate() {
        let coef = norms.layer_w[l] / (nl * n_kl);
        let mut dlogits = Array2::zeros((rec.n_tokens(), n_exp));
        for t in (0..rec.n_tokens()).filter(|&t| wf.include[t]) {
            let p = rec.probs.row(t).to_vec();
            let q = wf.q_tok.row(t).to_vec();
            prior += coef * kl(&p, &q, cfg.kl_direction);
            if l + 1 == n_layers {
                last_kl += kl(&p, &q, KlDirection::Forward).f64();
            }
            if want_grads && cfg.lambda_prior > 0.0 {
                let g = kl_logit_grad(&p, &q, cfg.kl_direction);
                for e in 0..n_exp {
                    dlogits[[t, e]] += lp * coef * g[e];
                }
                if ctx.gate_learnable {
                    let gq = kl_prior_grad(&p, &q, cfg.kl_direction);
                    let v = wf.seq.variate_id[t];
                    for e in 0..n_exp {
                        dq[v][e] += lp * coef * gq[e] * q_scale;
                    }
                }
            }
        }
        if want_grads && cfg.load_balance > 0.0 {
            // d/dp_{t,e} of E Σ f_e P_e / N_L with P_e a batch-wide mean
            let (f, _) = &norms.balance[l];
            let scale = lb * T::from_usize_lossy(n_exp) / (nl * T::from_usize_lossy(norms.n_tokens));
            for t in 0..rec.n_tokens() {
                let p = rec.probs.row(t);
                let pg: T = (0..n_exp).map(|e| p[e] * f[e]).sum();
                for e in 0..n_exp {
                    dlogits[[t, e]] += scale * p[e] * (f[e] - pg);
                }
            }
        }
        let cache = &wf.pass.layers[l].moe;
        let mut dexpert: Vec<Vec<Vec<T>>> = rec
            .topk
            .iter()
            .map(|s| vec![vec![T::zero(); model.config.d_model]; s.len()])
            .collect();
        for (t, sel) in rec.topk.iter().enumerate() {
            for (i, j) in pairs(sel, ctx.map) {
                let hi = cache.expert_output(t, i).to_vec();
                let hj = cache.expert_output(t, j).to_vec();
                let (c, gi, gj) = abs_cosine_grad(&hi, &hj);
                ortho += c / n_pairs;
                if want_grads && cfg.lambda_ortho > 0.0 {
                    for k in 0..gi.len() {
                        dexpert[t][i][k] += lo * gi[k] / n_pairs;
                        dexpert[t][j][k] += lo * gj[k] / n_pairs;
                    }
                }
            }
        }
        extra.push(LayerExtraGrads {
            dlogits: Some(dlogits),
            dexpert: Some(dexpert),
        });
    }

    let grads = if want_grads {
        let mut g = model.zeros_like();
        encoder_backward(&wf.seq, model, &wf.pass, &dpred, &extra, &mut g)?;
        if let Some(map) = ctx.map.filter(|m| ctx.gate_learnable && m.n_shared() > 0) {
            let gate = model.gate_params(true);
            for (v, q) in wf.priors.iter().enumerate() {
                let dpi: T = q.dq_dpi(map).iter().zip(&dq[v]).map(|(&a, &b)| a * b).sum();
                let (da, db) = shared_gate_grad(&w.profiles[v], &gate, ctx.drop);
                g.gate[0] += dpi * da;
                g.gate[1] += dpi * db;
            }
        }
        Some(g)
    } else {
        None
    };
    Ok(WindowTerms {
        task,
        prior,
        ortho,
        last_kl,
        grads,
    })
}
