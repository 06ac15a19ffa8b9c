use serde::{Deserialize, Serialize};

use crate::error::{AmeError, Result};

/// Shape of the encoder. Presets are desk-scale reductions of the model
/// family, not the published sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub experts_total: usize,
    pub top_k: usize,
    pub patch_len: usize,
    pub max_tokens: usize,
    pub expert_hidden: usize,
}

impl BackboneConfig {
    pub const PRESETS: [&'static str; 5] = ["tiny", "small", "base", "large", "ultra"];

    pub fn preset(name: &str) -> Option<Self> {
        let (d_model, n_layers, n_heads, experts_total, max_tokens) = match name {
            "tiny" => (32, 2, 2, 5, 64),
            "small" => (48, 3, 4, 10, 64),
            "base" => (64, 3, 4, 5, 64),
            "large" => (96, 4, 4, 5, 128),
            "ultra" => (128, 4, 8, 10, 128),
            _ => return None,
        };
        Some(BackboneConfig {
            d_model,
            n_layers,
            n_heads,
            experts_total,
            top_k: 2,
            patch_len: 16,
            max_tokens,
            expert_hidden: 2 * d_model,
        })
    }

    pub fn tiny() -> Self {
        Self::preset("tiny").expect("tiny preset")
    }

    /// One always-on feed-forward path in place of the expert pool.
    pub fn dense(mut self) -> Self {
        self.experts_total = 1;
        self.top_k = 1;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AmeError::invalid(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.experts_total == 0 || self.top_k == 0 || self.top_k > self.experts_total {
            return bad("top_k must lie in 1..=experts_total");
        }
        if self.patch_len == 0 || self.max_tokens == 0 || self.expert_hidden == 0 {
            return bad("patch_len, max_tokens and expert_hidden must be positive");
        }
        Ok(())
    }
}
