//! Encoder-only patch transformer whose feed-forward blocks are sparse
//! expert layers with top-k routing.

mod config;
mod embed;
mod encoder;
mod moe;
pub mod nn;
mod params;

#[cfg(test)]
mod tests;

pub use config::BackboneConfig;
pub use embed::{embed_and_pack, horizon_targets, PackedSequence, TokenLayout};
pub use encoder::{
    encoder_backward, encoder_forward, forecast, forecast_with, horizon_predictions, EncoderPass,
    ForwardOptions, LayerCache, LayerExtraGrads,
};
pub use moe::{
    expert_forward, moe_layer_backward, moe_layer_forward, route, top_k_indices, MoeCache,
    RoutingRecord,
};
pub use params::{ExpertParams, LayerParams, ModelState, TensorMut, TensorRef, GATE_TENSOR};

use ndarray::Array2;

use crate::prior::ExpertPrior;
use crate::scalar::Scalar;

/// Smoothing constant inside `log(q + ε)`.
pub const PRIOR_LOG_EPS: f64 = 1e-8;

/// Router logit offsets `β log(q_v + ε)` broadcast to each variate's tokens.
pub fn additive_prior_shift<T: Scalar>(
    seq: &PackedSequence<T>,
    priors: &[ExpertPrior<T>],
    beta: T,
) -> Array2<T> {
    let n_exp = priors.first().map_or(0, |q| q.probs.len());
    let eps = T::c(PRIOR_LOG_EPS);
    Array2::from_shape_fn((seq.n_tokens(), n_exp), |(t, e)| {
        beta * (priors[seq.variate_id[t]].probs[e] + eps).ln()
    })
}
