use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::BackboneConfig;
use crate::error::{AmeError, Result};
use crate::prior::GateParams;
use crate::scalar::Scalar;

/// Two-layer feed-forward expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// One pre-norm encoder block with an expert feed-forward stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    /// `d_model × E`, no bias.
    pub router: Array2<T>,
    pub experts: Vec<ExpertParams<T>>,
}

/// Every trainable array of the forecaster. Gradient buffers use the same
/// type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: BackboneConfig,
    /// `2P × d`: patch values followed by their validity flags.
    pub patch_w: Array2<T>,
    pub patch_b: Array1<T>,
    pub mask_token: Array1<T>,
    pub variate_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Array1<T>,
    pub lnf_b: Array1<T>,
    pub head_w: Array2<T>,
    pub head_b: Array1<T>,
    /// Shared-gate `[alpha, b]`; only updated when the gate is learnable.
    pub gate: Array1<T>,
}

/// Name of the gate tensor, which the optimizer treats specially.
pub const GATE_TENSOR: &str = "gate.params";

/// Calls `$add!(name, field)` for every tensor in checkpoint order.
macro_rules! each_tensor {
    ($s:expr, $iter:ident, $add:ident) => {{
        $add!("embed.patch_w".to_string(), $s.patch_w);
        $add!("embed.patch_b".to_string(), $s.patch_b);
        $add!("embed.mask".to_string(), $s.mask_token);
        $add!("embed.variate".to_string(), $s.variate_emb);
        $add!("embed.position".to_string(), $s.pos_emb);
        for (l, layer) in $s.layers.$iter().enumerate() {
            $add!(format!("layer{l}.ln1.g"), layer.ln1_g);
            $add!(format!("layer{l}.ln1.b"), layer.ln1_b);
            $add!(format!("layer{l}.attn.wq"), layer.wq);
            $add!(format!("layer{l}.attn.bq"), layer.bq);
            $add!(format!("layer{l}.attn.wk"), layer.wk);
            $add!(format!("layer{l}.attn.bk"), layer.bk);
            $add!(format!("layer{l}.attn.wv"), layer.wv);
            $add!(format!("layer{l}.attn.bv"), layer.bv);
            $add!(format!("layer{l}.attn.wo"), layer.wo);
            $add!(format!("layer{l}.attn.bo"), layer.bo);
            $add!(format!("layer{l}.ln2.g"), layer.ln2_g);
            $add!(format!("layer{l}.ln2.b"), layer.ln2_b);
            $add!(format!("layer{l}.router"), layer.router);
            for (e, ex) in layer.experts.$iter().enumerate() {
                $add!(format!("layer{l}.expert{e}.w1"), ex.w1);
                $add!(format!("layer{l}.expert{e}.b1"), ex.b1);
                $add!(format!("layer{l}.expert{e}.w2"), ex.w2);
                $add!(format!("layer{l}.expert{e}.b2"), ex.b2);
            }
        }
        $add!("final.ln.g".to_string(), $s.lnf_g);
        $add!("final.ln.b".to_string(), $s.lnf_b);
        $add!("head.w".to_string(), $s.head_w);
        $add!("head.b".to_string(), $s.head_b);
        $add!(GATE_TENSOR.to_string(), $s.gate);
    }};
}

/// A named flat view of one parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub data: &'a mut [T],
}

impl<T: Scalar> ModelState<T> {
    /// Zero-initialized state with the right shapes.
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let p = config.patch_len;
        let h = config.expert_hidden;
        let e = config.experts_total;
        let z1 = |n: usize| Array1::<T>::zeros(n);
        let z2 = |r: usize, c: usize| Array2::<T>::zeros((r, c));
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: z1(d),
                ln1_b: z1(d),
                wq: z2(d, d),
                bq: z1(d),
                wk: z2(d, d),
                bk: z1(d),
                wv: z2(d, d),
                bv: z1(d),
                wo: z2(d, d),
                bo: z1(d),
                ln2_g: z1(d),
                ln2_b: z1(d),
                router: z2(d, e),
                experts: (0..e)
                    .map(|_| ExpertParams {
                        w1: z2(d, h),
                        b1: z1(h),
                        w2: z2(h, d),
                        b2: z1(d),
                    })
                    .collect(),
            })
            .collect();
        Ok(ModelState {
            config,
            patch_w: z2(2 * p, d),
            patch_b: z1(d),
            mask_token: z1(d),
            variate_emb: z2(config.max_tokens, d),
            pos_emb: z2(config.max_tokens, d),
            layers,
            lnf_g: z1(d),
            lnf_b: z1(d),
            head_w: z2(d, p),
            head_b: z1(p),
            gate: z1(2),
        })
    }

    /// Seeded initialization: normal weights scaled by fan-in, unit layer
    /// norm gains, zero biases.
    pub fn init(config: BackboneConfig, gate: GateParams<T>, seed: u64) -> Result<Self> {
        let mut s = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |a: &mut Array2<T>, sd: f64| {
            let n = Normal::new(0.0, sd).expect("finite sd");
            a.iter_mut().for_each(|v| *v = T::c(n.sample(&mut rng)));
        };
        let d = config.d_model as f64;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        fill(&mut s.patch_w, fan(2 * config.patch_len));
        fill(&mut s.variate_emb, 0.02);
        fill(&mut s.pos_emb, 0.02);
        // reuse the normal fill for a 1×d view of the mask token
        let mut mask = s.mask_token.clone().insert_axis(ndarray::Axis(0));
        fill(&mut mask, 0.02);
        s.mask_token = mask.row(0).to_owned();
        let out_scale = fan(config.d_model) / (2.0 * config.n_layers.max(1) as f64).sqrt();
        for layer in &mut s.layers {
            layer.ln1_g.fill(T::one());
            layer.ln2_g.fill(T::one());
            fill(&mut layer.wq, 1.0 / d.sqrt());
            fill(&mut layer.wk, 1.0 / d.sqrt());
            fill(&mut layer.wv, 1.0 / d.sqrt());
            fill(&mut layer.wo, out_scale);
            fill(&mut layer.router, 0.02);
            for ex in &mut layer.experts {
                fill(&mut ex.w1, 1.0 / d.sqrt());
                fill(
                    &mut ex.w2,
                    fan(config.expert_hidden) / (2.0 * config.n_layers.max(1) as f64).sqrt(),
                );
            }
        }
        s.lnf_g.fill(T::one());
        fill(&mut s.head_w, 1.0 / d.sqrt());
        s.set_gate(&gate);
        Ok(s)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    pub fn gate_params(&self, learnable: bool) -> GateParams<T> {
        GateParams {
            alpha: self.gate[0],
            b: self.gate[1],
            learnable,
        }
    }

    pub fn set_gate(&mut self, gate: &GateParams<T>) {
        self.gate[0] = gate.alpha;
        self.gate[1] = gate.b;
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        macro_rules! add {
            ($name:expr, $a:expr) => {
                out.push(TensorRef {
                    name: $name,
                    shape: $a.shape().to_vec(),
                    data: $a.as_slice().expect("standard layout"),
                })
            };
        }
        each_tensor!(self, iter, add);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        macro_rules! add {
            ($name:expr, $a:expr) => {
                out.push(TensorMut {
                    name: $name,
                    data: $a.as_slice_mut().expect("standard layout"),
                })
            };
        }
        each_tensor!(self, iter_mut, add);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += other`, tensor by tensor in a fixed order.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.data.iter_mut().zip(b.data).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Global l2 norm over every tensor except the gate.
    pub fn global_norm(&self, include_gate: bool) -> T {
        self.tensors()
            .iter()
            .filter(|t| include_gate || t.name != GATE_TENSOR)
            .flat_map(|t| t.data.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    /// Order-sensitive digest of every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        crate::scalar::digest(
            self.tensors()
                .iter()
                .flat_map(|t| t.data.iter().map(|x| x.bits())),
        )
    }

    /// Cast every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let mut out = ModelState::<U>::zeros(self.config).expect("validated config");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.data
                .iter_mut()
                .zip(src.data)
                .for_each(|(d, &s)| *d = U::c(s.f64()));
        }
        out
    }

    /// Check that `other` has exactly this state's tensor names and shapes.
    pub fn same_topology(&self, other: &Self) -> Result<()> {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len() {
            return Err(AmeError::Shape(format!(
                "{} tensors vs {}",
                a.len(),
                b.len()
            )));
        }
        for (x, y) in a.iter().zip(&b) {
            if x.name != y.name || x.shape != y.shape {
                return Err(AmeError::Shape(format!(
                    "{} {:?} vs {} {:?}",
                    x.name, x.shape, y.name, y.shape
                )));
            }
        }
        Ok(())
    }
}
