use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inference::Inference;
use crate::descriptors::Descriptor;
use crate::error::{AmeError, Result};
use crate::metrics::{calinski_harabasz, expert_usage, Assignments, ExpertUsage, ProbeSet};
use crate::parallel::par_map;
use crate::prior::AnchorMap;
use crate::series::{Series, Window};
use crate::synthetic::Family;

/// `n` seeded windows spread over the eligible series: every series is
/// visited once, in shuffled order, before any repeats.
pub fn probe_windows(
    data: &[Series<f64>],
    n: usize,
    context_len: usize,
    horizon_len: usize,
    seed: u64,
) -> Result<Vec<Window<f64>>> {
    let need = context_len + horizon_len;
    let mut eligible: Vec<&Series<f64>> = data.iter().filter(|s| s.len() >= need).collect();
    if eligible.is_empty() {
        return Err(AmeError::InsufficientData(format!("no series has {need} values")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    (0..n)
        .map(|i| {
            let s = eligible[i % eligible.len()];
            let off = rng.random_range(0..=s.len() - need);
            Window::at(s, off, context_len, horizon_len)
        })
        .collect()
}

/// Top-1 routing of every probe window, `[probe][layer][token]`.
pub fn capture(inference: &Inference<'_>, windows: &[Window<f64>]) -> Result<Assignments> {
    par_map(windows, |w| inference.top1(w)).into_iter().collect()
}

/// Freeze the reference routing of a probe set.
pub fn capture_probe_set(inference: &Inference<'_>, windows: &[Window<f64>]) -> Result<ProbeSet> {
    let probes = windows.iter().map(|w| (w.source_id.clone(), w.offset)).collect();
    ProbeSet::new(probes, capture(inference, windows)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    /// Residual stream after the layer.
    Encoder,
    /// Raw router logits of the layer.
    Router,
}

/// Calinski-Harabasz index of one layer's tokens, clustered by their top-1
/// expert. `None` when routing used a single expert, where the index is
/// undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub layer: usize,
    pub space: Space,
    pub clusters: usize,
    pub ch: Option<f64>,
}

/// Last-layer top-1 share of a family's tokens that land on the experts
/// anchored to the family's descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchoredShare {
    pub family: Family,
    pub descriptor: Descriptor,
    pub tokens: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub separation: Vec<Separation>,
    pub usage: ExpertUsage,
    pub anchored: Vec<AnchoredShare>,
}

impl Analysis {
    pub fn ch(&self, layer: usize, space: Space) -> Option<f64> {
        self.separation
            .iter()
            .find(|s| s.layer == layer && s.space == space)
            .and_then(|s| s.ch)
    }

    pub fn anchored_share(&self, family: Family) -> Option<f64> {
        self.anchored.iter().find(|a| a.family == family).map(|a| a.share)
    }
}

/// Label of the series a window came from, read as a generator family.
pub fn window_family(data: &[Series<f64>], w: &Window<f64>) -> Option<Family> {
    data.iter()
        .find(|s| s.id == w.source_id)
        .and_then(|s| s.label.as_deref())
        .and_then(Family::parse)
}

/// Routing and representation statistics of a model over fixed windows.
/// `map` fixes which expert indices count as anchored; baselines are read
/// through the same indices.
pub fn analyze(
    inference: &Inference<'_>,
    windows: &[Window<f64>],
    families: &[Option<Family>],
    map: Option<&AnchorMap>,
) -> Result<Analysis> {
    if windows.len() != families.len() {
        return Err(AmeError::invalid("one family label per window is required"));
    }
    let passes = par_map(windows, |w| inference.run(w).map(|p| p.pass))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n_layers = inference.model.config.n_layers;
    let mut separation = Vec::new();
    for l in 0..n_layers {
        let labels: Vec<usize> = passes
            .iter()
            .flat_map(|p| {
                let r = &p.records[l];
                (0..r.n_tokens()).map(|t| r.top1(t))
            })
            .collect();
        let mut distinct = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        for space in [Space::Encoder, Space::Router] {
            let points: Vec<Vec<f64>> = passes
                .iter()
                .flat_map(|p| {
                    let m = match space {
                        Space::Encoder => &p.layer_outputs[l],
                        Space::Router => &p.records[l].logits,
                    };
                    m.rows()
                        .into_iter()
                        .map(|r| r.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>())
                        .collect::<Vec<_>>()
                })
                .collect();
            let ch = match calinski_harabasz(&points, &labels) {
                Ok(v) => Some(v),
                Err(AmeError::Cluster(_)) => None,
                Err(e) => return Err(e),
            };
            separation.push(Separation {
                layer: l,
                space,
                clusters: distinct.len(),
                ch,
            });
        }
    }
    let records: Vec<_> = passes.iter().map(|p| p.records.clone()).collect();
    let usage = expert_usage(&records);
    let mut anchored = Vec::new();
    if let (Some(map), Some(last)) = (map, n_layers.checked_sub(1)) {
        for family in Family::SINGLE {
            let Some(d) = family.descriptor() else { continue };
            let group = map.experts_for(d);
            let (mut hit, mut n) = (0usize, 0usize);
            for (p, f) in passes.iter().zip(families) {
                if *f != Some(family) {
                    continue;
                }
                let r = &p.records[last];
                n += r.n_tokens();
                hit += (0..r.n_tokens()).filter(|&t| group.contains(&r.top1(t))).count();
            }
            if n > 0 {
                anchored.push(AnchoredShare {
                    family,
                    descriptor: d,
                    tokens: n,
                    share: hit as f64 / n as f64,
                });
            }
        }
    }
    Ok(Analysis {
        separation,
        usage,
        anchored,
    })
}
