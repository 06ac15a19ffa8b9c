//! Directory checkpoints: `manifest.json` describing every tensor, a flat
//! little-endian `weights.bin`, and optionally `regime.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimState;
use crate::backbone::{BackboneConfig, ModelState};
use crate::error::{AmeError, Result};
use crate::prior::AnchorMap;
use crate::regime::RegimeSource;
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const REGIME_FILE: &str = "regime.json";

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the weights file.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorEntry {
    n_specialized: usize,
    n_shared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateEntry {
    alpha: f64,
    b: f64,
    learnable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dtype: String,
    config: BackboneConfig,
    step: usize,
    anchor: Option<AnchorEntry>,
    /// Informational copy; the gate tensor in the weights is authoritative.
    gate: GateEntry,
    optimizer_step: Option<usize>,
    has_regime: bool,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelState<T>,
    /// Descriptor anchoring; absent for dense models.
    pub map: Option<AnchorMap>,
    pub gate_learnable: bool,
    /// Number of completed optimization steps.
    pub step: usize,
    pub optim: Option<OptimState<T>>,
    pub regime: Option<RegimeSource>,
    /// Free-form run description kept alongside the weights.
    pub metadata: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: ModelState<T>, map: Option<AnchorMap>, gate_learnable: bool) -> Self {
        Checkpoint {
            model,
            map,
            gate_learnable,
            step: 0,
            optim: None,
            regime: None,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| AmeError::io(dir, e))?;
        let mut bytes = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[T]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: bytes.len(),
                len: data.len(),
            });
            data.iter().for_each(|&x| x.write_le(&mut bytes));
        };
        for t in self.model.tensors() {
            push(t.name, t.shape, t.data);
        }
        if let Some(opt) = &self.optim {
            for (prefix, state) in [(ADAM_M, &opt.m), (ADAM_V, &opt.v)] {
                for t in state.tensors() {
                    push(format!("{prefix}{}", t.name), t.shape, t.data);
                }
            }
        }
        let gate = self.model.gate_params(self.gate_learnable);
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            dtype: T::DTYPE.to_string(),
            config: self.model.config,
            step: self.step,
            anchor: self.map.as_ref().map(|m| AnchorEntry {
                n_specialized: m.n_specialized(),
                n_shared: m.n_shared(),
            }),
            gate: GateEntry {
                alpha: gate.alpha.f64(),
                b: gate.b.f64(),
                learnable: gate.learnable,
            },
            optimizer_step: self.optim.as_ref().map(|o| o.step),
            has_regime: self.regime.is_some(),
            metadata: self.metadata.clone(),
            tensors,
        };
        write(&dir.join(WEIGHTS_FILE), &bytes)?;
        write(&dir.join(MANIFEST_FILE), &to_json(&manifest)?)?;
        if let Some(r) = &self.regime {
            write(&dir.join(REGIME_FILE), &to_json(r)?)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let raw = read(&dir.join(MANIFEST_FILE))?;
        let value: serde_json::Value = serde_json::from_slice(&raw).map_err(bad_json)?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| AmeError::Checkpoint("manifest has no format_version".into()))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(AmeError::Version {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: CHECKPOINT_VERSION,
            });
        }
        let m: Manifest = serde_json::from_value(value).map_err(bad_json)?;
        if m.dtype != T::DTYPE {
            return Err(AmeError::Checkpoint(format!(
                "stored as {}, requested {}",
                m.dtype,
                T::DTYPE
            )));
        }
        let map = match &m.anchor {
            Some(a) => {
                let map = AnchorMap::new(a.n_specialized, a.n_shared)?;
                if map.n_experts() != m.config.experts_total {
                    return Err(AmeError::Shape(format!(
                        "anchor map covers {} experts, config has {}",
                        map.n_experts(),
                        m.config.experts_total
                    )));
                }
                Some(map)
            }
            None => None,
        };
        let bytes = read(&dir.join(WEIGHTS_FILE))?;
        let lookup = |name: &str| m.tensors.iter().find(|e| e.name == name);

        let mut model = ModelState::<T>::zeros(m.config)?;
        fill(&mut model, "", &lookup, &bytes)?;
        let optim = match m.optimizer_step {
            Some(step) => {
                let mut o = OptimState::new(&model);
                o.step = step;
                fill(&mut o.m, ADAM_M, &lookup, &bytes)?;
                fill(&mut o.v, ADAM_V, &lookup, &bytes)?;
                Some(o)
            }
            None => None,
        };
        let expected = model.tensors().len() * if optim.is_some() { 3 } else { 1 };
        if m.tensors.len() != expected {
            return Err(AmeError::Shape(format!(
                "manifest lists {} tensors, expected {expected}",
                m.tensors.len()
            )));
        }
        let regime = if m.has_regime {
            let raw = read(&dir.join(REGIME_FILE))?;
            Some(serde_json::from_slice(&raw).map_err(bad_json)?)
        } else {
            None
        };
        Ok(Checkpoint {
            model,
            map,
            gate_learnable: m.gate.learnable,
            step: m.step,
            optim,
            regime,
            metadata: m.metadata,
        })
    }
}

fn fill<'a, T: Scalar>(
    state: &mut ModelState<T>,
    prefix: &str,
    lookup: &impl Fn(&str) -> Option<&'a TensorEntry>,
    bytes: &[u8],
) -> Result<()> {
    let shapes: Vec<Vec<usize>> = state.tensors().into_iter().map(|t| t.shape).collect();
    for (t, shape) in state.tensors_mut().into_iter().zip(shapes) {
        let name = format!("{prefix}{}", t.name);
        let e = lookup(&name).ok_or_else(|| AmeError::Checkpoint(format!("missing tensor `{name}`")))?;
        if e.shape != shape || e.len != t.data.len() {
            return Err(AmeError::Shape(format!(
                "`{name}` stored as {:?}, config needs {shape:?}",
                e.shape
            )));
        }
        let end = e.offset + e.len * T::BYTES;
        let chunk = bytes
            .get(e.offset..end)
            .ok_or_else(|| AmeError::Checkpoint(format!("`{name}` runs past the end of the weights")))?;
        for (d, c) in t.data.iter_mut().zip(chunk.chunks_exact(T::BYTES)) {
            *d = T::read_le(c);
        }
    }
    Ok(())
}

fn to_json<S: Serialize>(v: &S) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| AmeError::Checkpoint(e.to_string()))
}

fn bad_json(e: serde_json::Error) -> AmeError {
    AmeError::Parse {
        line: e.line(),
        message: e.to_string(),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| AmeError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AmeError::io(path, e))
}
