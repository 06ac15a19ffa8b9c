use ndarray::Array2;

use super::params::ModelState;
use crate::error::{AmeError, Result};
use crate::scalar::Scalar;
use crate::series::Window;

/// Token geometry of one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_variates: usize,
    pub context_len: usize,
    pub horizon_len: usize,
    pub patch_len: usize,
}

impl TokenLayout {
    pub fn new(
        n_variates: usize,
        context_len: usize,
        horizon_len: usize,
        patch_len: usize,
    ) -> Self {
        TokenLayout {
            n_variates,
            context_len,
            horizon_len,
            patch_len,
        }
    }

    /// Context is left-padded so its last patch ends at the forecast origin.
    pub fn context_tokens(&self) -> usize {
        self.context_len.div_ceil(self.patch_len)
    }

    pub fn horizon_tokens(&self) -> usize {
        self.horizon_len.div_ceil(self.patch_len)
    }

    pub fn tokens_per_variate(&self) -> usize {
        self.context_tokens() + self.horizon_tokens()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_variates * self.tokens_per_variate()
    }

    pub fn left_pad(&self) -> usize {
        self.context_tokens() * self.patch_len - self.context_len
    }

    /// Token index of variate `v`, local position `pos`.
    pub fn token(&self, v: usize, pos: usize) -> usize {
        v * self.tokens_per_variate() + pos
    }

    pub fn is_horizon(&self, pos: usize) -> bool {
        pos >= self.context_tokens()
    }
}

/// Tokens of one window ready for the encoder. Variates are packed one after
/// another, each as context tokens followed by horizon tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence<T> {
    pub layout: TokenLayout,
    pub tokens: Array2<T>,
    pub variate_id: Vec<usize>,
    pub position: Vec<usize>,
    pub is_masked: Vec<bool>,
    pub pad_mask: Vec<bool>,
    /// Raw `[values | valid]` patch input per token; zero rows on masked
    /// tokens. Kept for the patch-projection gradient.
    pub patch_inputs: Array2<T>,
}

impl<T: Scalar> PackedSequence<T> {
    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }
}

/// Patch input rows `[values | valid]` for the context of every variate.
fn context_patches<T: Scalar>(layout: &TokenLayout, context: &[Vec<T>]) -> Array2<T> {
    let p = layout.patch_len;
    let ct = layout.context_tokens();
    let pad = layout.left_pad();
    let mut out = Array2::zeros((layout.n_variates * ct, 2 * p));
    for (v, series) in context.iter().enumerate() {
        for (t, &x) in series.iter().enumerate() {
            let slot = t + pad;
            let row = v * ct + slot / p;
            out[[row, slot % p]] = x;
            out[[row, p + slot % p]] = T::one();
        }
    }
    out
}

/// Embed a standardized window. `context_mask[v][i]` hides context token `i`
/// of variate `v` behind the mask embedding; horizon tokens are always
/// masked.
pub fn embed_and_pack<T: Scalar>(
    window: &Window<T>,
    model: &ModelState<T>,
    context_mask: Option<&[Vec<bool>]>,
) -> Result<PackedSequence<T>> {
    let cfg = &model.config;
    let layout = TokenLayout::new(
        window.n_variates(),
        window.context_len(),
        window.horizon_len(),
        cfg.patch_len,
    );
    if layout.n_variates == 0 || layout.context_len == 0 || layout.horizon_len == 0 {
        return Err(AmeError::Shape(
            "window needs a context and a horizon".into(),
        ));
    }
    let n = layout.n_tokens();
    if n > cfg.max_tokens {
        return Err(AmeError::SequenceTooLong {
            tokens: n,
            max: cfg.max_tokens,
        });
    }
    if let Some(m) = context_mask {
        if m.len() != layout.n_variates || m.iter().any(|r| r.len() != layout.context_tokens()) {
            return Err(AmeError::Shape(
                "context mask does not match the token layout".into(),
            ));
        }
    }
    let ct = layout.context_tokens();
    let tpv = layout.tokens_per_variate();
    let ctx = context_patches(&layout, &window.context);
    let projected = ctx.dot(&model.patch_w) + &model.patch_b;

    let d = cfg.d_model;
    let mut tokens = Array2::zeros((n, d));
    let mut patch_inputs = Array2::zeros((n, 2 * cfg.patch_len));
    let mut variate_id = Vec::with_capacity(n);
    let mut position = Vec::with_capacity(n);
    let mut is_masked = Vec::with_capacity(n);
    for v in 0..layout.n_variates {
        for pos in 0..tpv {
            let t = layout.token(v, pos);
            let masked = layout.is_horizon(pos) || context_mask.is_some_and(|m| m[v][pos]);
            let mut row = tokens.row_mut(t);
            if masked {
                row.assign(&model.mask_token);
            } else {
                row.assign(&projected.row(v * ct + pos));
                patch_inputs.row_mut(t).assign(&ctx.row(v * ct + pos));
            }
            row += &model.variate_emb.row(v);
            row += &model.pos_emb.row(pos);
            variate_id.push(v);
            position.push(pos);
            is_masked.push(masked);
        }
    }
    Ok(PackedSequence {
        layout,
        tokens,
        variate_id,
        position,
        is_masked,
        pad_mask: vec![false; n],
        patch_inputs,
    })
}

/// Accumulate embedding gradients from `d_tokens`.
pub(crate) fn embed_backward<T: Scalar>(
    seq: &PackedSequence<T>,
    d_tokens: &Array2<T>,
    grads: &mut ModelState<T>,
) {
    let mut observed = Vec::new();
    for t in 0..seq.n_tokens() {
        if seq.pad_mask[t] {
            continue;
        }
        let g = d_tokens.row(t);
        let mut ve = grads.variate_emb.row_mut(seq.variate_id[t]);
        ve += &g;
        let mut pe = grads.pos_emb.row_mut(seq.position[t]);
        pe += &g;
        if seq.is_masked[t] {
            grads.mask_token += &g;
        } else {
            observed.push(t);
        }
    }
    if observed.is_empty() {
        return;
    }
    let x = seq.patch_inputs.select(ndarray::Axis(0), &observed);
    let g = d_tokens.select(ndarray::Axis(0), &observed);
    grads.patch_w += &x.t().dot(&g);
    grads.patch_b += &g.sum_axis(ndarray::Axis(0));
}

/// Target values and validity per horizon slot of each horizon token,
/// shaped `[n_tokens × P]`; non-horizon rows are invalid.
pub fn horizon_targets<T: Scalar>(
    layout: &TokenLayout,
    horizon: &[Vec<T>],
) -> (Array2<T>, Vec<Vec<bool>>) {
    let p = layout.patch_len;
    let n = layout.n_tokens();
    let mut values = Array2::zeros((n, p));
    let mut valid = vec![vec![false; p]; n];
    for (v, series) in horizon.iter().enumerate() {
        for (i, &y) in series.iter().enumerate() {
            let t = layout.token(v, layout.context_tokens() + i / p);
            values[[t, i % p]] = y;
            valid[t][i % p] = true;
        }
    }
    (values, valid)
}
