use crate::backbone::{
    additive_prior_shift, embed_and_pack, encoder_forward, horizon_predictions, EncoderPass, ForwardOptions,
    ModelState, PackedSequence, TokenLayout,
};
use crate::descriptors::Descriptor;
use crate::error::Result;
use crate::prior::{expert_prior_masked, AnchorMap};
use crate::regime::RegimeSource;
use crate::series::{standardize_window, NormStats, Window};

/// Inference-time logit offset of the additive-prior variant.
#[derive(Debug, Clone, Copy)]
pub struct AdditivePrior<'a> {
    pub source: &'a RegimeSource,
    pub map: &'a AnchorMap,
    pub beta: f64,
    pub drop: Option<Descriptor>,
}

/// A trained model as used after training: no masking, horizon blanked.
#[derive(Debug, Clone, Copy)]
pub struct Inference<'a> {
    pub model: &'a ModelState<f32>,
    pub additive: Option<AdditivePrior<'a>>,
    pub gate_learnable: bool,
}

pub struct InferencePass {
    pub seq: PackedSequence<f32>,
    pub pass: EncoderPass<f32>,
    pub stats: NormStats<f32>,
}

impl InferencePass {
    /// Horizon forecast per variate in the original units.
    pub fn forecast(&self) -> Vec<Vec<f64>> {
        horizon_predictions(&self.seq, &self.pass.predictions)
            .iter()
            .enumerate()
            .map(|(v, y)| self.stats.denormalize(v, y).iter().map(|&x| f64::from(x)).collect())
            .collect()
    }
}

impl<'a> Inference<'a> {
    pub fn new(model: &'a ModelState<f32>) -> Self {
        Inference {
            model,
            additive: None,
            gate_learnable: false,
        }
    }

    /// Whether a window of this shape fits the token budget.
    pub fn fits(&self, n_variates: usize, context_len: usize, horizon_len: usize) -> bool {
        let cfg = &self.model.config;
        TokenLayout::new(n_variates, context_len, horizon_len, cfg.patch_len).n_tokens() <= cfg.max_tokens
    }

    pub fn run(&self, window: &Window<f64>) -> Result<InferencePass> {
        let blank = Window {
            context: window
                .context
                .iter()
                .map(|c| c.iter().map(|&x| x as f32).collect())
                .collect(),
            horizon: window.horizon.iter().map(|h| vec![0.0f32; h.len()]).collect(),
            source_id: window.source_id.clone(),
            offset: window.offset,
        };
        let (norm, stats) = standardize_window(&blank);
        let seq = embed_and_pack(&norm, self.model, None)?;
        let shift = match &self.additive {
            Some(a) => {
                let gate = self.model.gate_params(self.gate_learnable);
                let priors = window
                    .context
                    .iter()
                    .map(|c| Ok(expert_prior_masked(&a.source.profile(c)?.cast(), a.map, &gate, a.drop)))
                    .collect::<Result<Vec<_>>>()?;
                Some(additive_prior_shift(&seq, &priors, a.beta as f32))
            }
            None => None,
        };
        let pass = encoder_forward(
            &seq,
            self.model,
            ForwardOptions {
                prior_shift: shift.as_ref(),
                forced: None,
            },
        )?;
        Ok(InferencePass { seq, pass, stats })
    }

    /// Top-1 expert of every token, `[layer][token]`.
    pub fn top1(&self, window: &Window<f64>) -> Result<Vec<Vec<usize>>> {
        let p = self.run(window)?;
        Ok(p.pass
            .records
            .iter()
            .map(|r| (0..r.n_tokens()).map(|t| r.top1(t)).collect())
            .collect())
    }
}
