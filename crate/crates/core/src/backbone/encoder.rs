use ndarray::{Array2, Axis};

use super::embed::{embed_and_pack, embed_backward, PackedSequence};
use super::moe::{moe_layer_backward, moe_layer_forward, MoeCache, RoutingRecord};
use super::nn::{
    attention, attention_backward, layer_norm, layer_norm_backward, AttnCache, AttnGrads,
    AttnParams, LnCache,
};
use super::params::{LayerParams, ModelState};
use crate::error::{AmeError, Result};
use crate::scalar::Scalar;
use crate::series::{standardize_window, NormStats, Window};

/// Optional modifiers of a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a, T> {
    /// Per-token router logit offsets, applied at every layer.
    pub prior_shift: Option<&'a Array2<T>>,
    /// Fixed expert choice per layer and token.
    pub forced: Option<&'a [Vec<Vec<usize>>]>,
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub ln1: LnCache<T>,
    pub attn: AttnCache<T>,
    pub ln2: LnCache<T>,
    pub moe: MoeCache<T>,
}

/// Everything a forward pass produced, kept for analysis and backward.
#[derive(Debug, Clone)]
pub struct EncoderPass<T> {
    /// Residual stream after the last block, `[n_tokens × d]`.
    pub representations: Array2<T>,
    /// Router input of each layer (the normalized stream).
    pub router_inputs: Vec<Array2<T>>,
    /// Residual stream after each block.
    pub layer_outputs: Vec<Array2<T>>,
    pub records: Vec<RoutingRecord<T>>,
    pub layers: Vec<LayerCache<T>>,
    pub final_ln: LnCache<T>,
    /// Head output for every token, `[n_tokens × P]`.
    pub predictions: Array2<T>,
}

fn attn_params<T>(l: &LayerParams<T>) -> AttnParams<'_, T> {
    AttnParams {
        wq: &l.wq,
        bq: &l.bq,
        wk: &l.wk,
        bk: &l.bk,
        wv: &l.wv,
        bv: &l.bv,
        wo: &l.wo,
        bo: &l.bo,
    }
}

pub fn encoder_forward<T: Scalar>(
    seq: &PackedSequence<T>,
    model: &ModelState<T>,
    opts: ForwardOptions<'_, T>,
) -> Result<EncoderPass<T>> {
    let cfg = &model.config;
    if seq.tokens.ncols() != cfg.d_model {
        return Err(AmeError::Shape(format!(
            "token width {} vs d_model {}",
            seq.tokens.ncols(),
            cfg.d_model
        )));
    }
    if let Some(f) = opts.forced {
        if f.len() != cfg.n_layers {
            return Err(AmeError::LayerMismatch {
                expected: cfg.n_layers,
                got: f.len(),
            });
        }
    }
    let mut x = seq.tokens.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut records = Vec::with_capacity(cfg.n_layers);
    let mut router_inputs = Vec::with_capacity(cfg.n_layers);
    let mut layer_outputs = Vec::with_capacity(cfg.n_layers);
    for (l, lp) in model.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let (att, attn) = attention(&a, &attn_params(lp), cfg.n_heads, &seq.pad_mask);
        x += &att;
        let (b, ln2) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
        let forced = opts.forced.map(|f| f[l].as_slice());
        let (y, rec, moe) = moe_layer_forward(&b, lp, cfg.top_k, opts.prior_shift, forced)?;
        x += &y;
        layer_outputs.push(x.clone());
        router_inputs.push(b);
        records.push(rec);
        layers.push(LayerCache {
            ln1,
            attn,
            ln2,
            moe,
        });
    }
    let (z, final_ln) = layer_norm(&x, &model.lnf_g, &model.lnf_b);
    let predictions = z.dot(&model.head_w) + &model.head_b;
    Ok(EncoderPass {
        representations: x,
        router_inputs,
        layer_outputs,
        records,
        layers,
        final_ln,
        predictions,
    })
}

/// Auxiliary gradients injected at one layer's router and experts.
#[derive(Debug, Clone, Default)]
pub struct LayerExtraGrads<T> {
    pub dlogits: Option<Array2<T>>,
    /// `[token][slot] -> d expert output`.
    pub dexpert: Option<Vec<Vec<Vec<T>>>>,
}

/// Reverse pass. `dpred` is the loss gradient for every head output row;
/// rows of unused tokens are zero.
pub fn encoder_backward<T: Scalar>(
    seq: &PackedSequence<T>,
    model: &ModelState<T>,
    pass: &EncoderPass<T>,
    dpred: &Array2<T>,
    extra: &[LayerExtraGrads<T>],
    grads: &mut ModelState<T>,
) -> Result<()> {
    let cfg = &model.config;
    if !extra.is_empty() && extra.len() != cfg.n_layers {
        return Err(AmeError::LayerMismatch {
            expected: cfg.n_layers,
            got: extra.len(),
        });
    }
    let z = &pass.final_ln.xhat * &model.lnf_g + &model.lnf_b;
    grads.head_w += &z.t().dot(dpred);
    grads.head_b += &dpred.sum_axis(Axis(0));
    let dz = dpred.dot(&model.head_w.t());
    let mut dx = layer_norm_backward(
        &dz,
        &pass.final_ln,
        &model.lnf_g,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );

    for l in (0..cfg.n_layers).rev() {
        let lp = &model.layers[l];
        let lc = &pass.layers[l];
        let gl = &mut grads.layers[l];
        let ex = extra.get(l);
        let db = moe_layer_backward(
            &dx,
            &pass.records[l],
            &lc.moe,
            lp,
            gl,
            ex.and_then(|e| e.dlogits.as_ref()),
            ex.and_then(|e| e.dexpert.as_deref()),
        );
        dx += &layer_norm_backward(&db, &lc.ln2, &lp.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
        let g = AttnGrads {
            wq: &mut gl.wq,
            bq: &mut gl.bq,
            wk: &mut gl.wk,
            bk: &mut gl.bk,
            wv: &mut gl.wv,
            bv: &mut gl.bv,
            wo: &mut gl.wo,
            bo: &mut gl.bo,
        };
        let da = attention_backward(&dx, &lc.attn, &attn_params(lp), g, cfg.n_heads);
        dx += &layer_norm_backward(&da, &lc.ln1, &lp.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
    }
    embed_backward(seq, &dx, grads);
    Ok(())
}

/// Horizon predictions in normalized units, one vector per variate.
pub fn horizon_predictions<T: Scalar>(
    seq: &PackedSequence<T>,
    predictions: &Array2<T>,
) -> Vec<Vec<T>> {
    let lay = &seq.layout;
    let p = lay.patch_len;
    (0..lay.n_variates)
        .map(|v| {
            (0..lay.horizon_len)
                .map(|i| predictions[[lay.token(v, lay.context_tokens() + i / p), i % p]])
                .collect()
        })
        .collect()
}

/// Point forecast for the window's horizon length. Uses only the learned
/// router unless `prior_shift` is supplied.
pub fn forecast<T: Scalar>(model: &ModelState<T>, window: &Window<T>) -> Result<Vec<Vec<T>>> {
    forecast_with(model, window, ForwardOptions::default()).map(|(y, _)| y)
}

pub fn forecast_with<T: Scalar>(
    model: &ModelState<T>,
    window: &Window<T>,
    opts: ForwardOptions<'_, T>,
) -> Result<(Vec<Vec<T>>, NormStats<T>)> {
    // horizon values are never read: only their count shapes the tokens
    let blank = Window {
        context: window.context.clone(),
        horizon: window
            .horizon
            .iter()
            .map(|h| vec![T::zero(); h.len()])
            .collect(),
        source_id: window.source_id.clone(),
        offset: window.offset,
    };
    let (norm, stats) = standardize_window(&blank);
    let seq = embed_and_pack(&norm, model, None)?;
    let pass = encoder_forward(&seq, model, opts)?;
    let normalized = horizon_predictions(&seq, &pass.predictions);
    let out = normalized
        .iter()
        .enumerate()
        .map(|(v, y)| stats.denormalize(v, y))
        .collect();
    Ok((out, stats))
}
