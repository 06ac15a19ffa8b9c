//! Regime-labeled synthetic series with known generating structure.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::descriptors::Descriptor;
use crate::error::{AmeError, Result};
use crate::series::Series;

/// Generator families. The first four are the single-structure regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Seasonal,
    Trend,
    Sparse,
    Noise,
    Composite,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Seasonal,
        Family::Trend,
        Family::Sparse,
        Family::Noise,
        Family::Composite,
    ];
    pub const SINGLE: [Family; 4] = [
        Family::Seasonal,
        Family::Trend,
        Family::Sparse,
        Family::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Seasonal => "seasonal",
            Family::Trend => "trend",
            Family::Sparse => "sparse",
            Family::Noise => "noise",
            Family::Composite => "composite",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    /// The descriptor whose axis the family is built to move. Noise sits at
    /// the low end of the forecastability axis.
    pub fn descriptor(self) -> Option<Descriptor> {
        match self {
            Family::Seasonal => Some(Descriptor::Seasonality),
            Family::Trend => Some(Descriptor::Trend),
            Family::Sparse => Some(Descriptor::Sparsity),
            Family::Noise => Some(Descriptor::Forecastability),
            Family::Composite => None,
        }
    }
}

/// Relative weights over generator families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeMix {
    #[serde(default)]
    pub seasonal: f64,
    #[serde(default)]
    pub trend: f64,
    #[serde(default)]
    pub sparse: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub composite: f64,
}

impl RegimeMix {
    pub fn single_families() -> Self {
        RegimeMix {
            seasonal: 1.0,
            trend: 1.0,
            sparse: 1.0,
            noise: 1.0,
            composite: 0.0,
        }
    }

    pub fn only(family: Family) -> Self {
        let mut m = RegimeMix {
            seasonal: 0.0,
            trend: 0.0,
            sparse: 0.0,
            noise: 0.0,
            composite: 0.0,
        };
        *m.weight_mut(family) = 1.0;
        m
    }

    pub fn weight(&self, f: Family) -> f64 {
        match f {
            Family::Seasonal => self.seasonal,
            Family::Trend => self.trend,
            Family::Sparse => self.sparse,
            Family::Noise => self.noise,
            Family::Composite => self.composite,
        }
    }

    fn weight_mut(&mut self, f: Family) -> &mut f64 {
        match f {
            Family::Seasonal => &mut self.seasonal,
            Family::Trend => &mut self.trend,
            Family::Sparse => &mut self.sparse,
            Family::Noise => &mut self.noise,
            Family::Composite => &mut self.composite,
        }
    }
}

impl Default for RegimeMix {
    fn default() -> Self {
        RegimeMix {
            composite: 1.0,
            ..Self::single_families()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub length: usize,
    #[serde(default)]
    pub regime_mix: RegimeMix,
    /// Additive noise, relative to the structured component's scale.
    #[serde(default = "default_noise_level")]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise_level() -> f64 {
    0.3
}

impl SyntheticSpec {
    pub fn new(count: usize, length: usize, seed: u64) -> Self {
        SyntheticSpec {
            count,
            length,
            regime_mix: RegimeMix::default(),
            noise_level: default_noise_level(),
            seed,
        }
    }

    pub fn with_mix(mut self, mix: RegimeMix) -> Self {
        self.regime_mix = mix;
        self
    }

    pub fn with_noise(mut self, noise_level: f64) -> Self {
        self.noise_level = noise_level;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ws = Family::ALL.map(|f| self.regime_mix.weight(f));
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(AmeError::invalid(
                "regime weights must be non-negative with positive sum",
            ));
        }
        if self.count < 1 {
            return Err(AmeError::invalid("synthetic count must be at least 1"));
        }
        if self.length < 16 {
            return Err(AmeError::invalid("synthetic length must be at least 16"));
        }
        if !self.noise_level.is_finite() || self.noise_level < 0.0 {
            return Err(AmeError::invalid(
                "noise level must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Analytic parameters of one generated series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub family: Family,
    /// Dominant single family; equals `family` except for composites.
    pub label: Family,
    pub level: f64,
    pub scale: f64,
    pub period: Option<usize>,
    pub harmonics: Vec<(f64, f64)>,
    pub drift: f64,
    pub curvature: f64,
    pub spike_prob: f64,
    pub noise_sd: f64,
    /// Composite only: secondary family and the dominant weight.
    pub secondary: Option<Family>,
    pub mix_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub series: Series<f64>,
    pub params: GeneratorParams,
}

/// Largest-remainder allocation of `count` slots to the mix weights.
fn allocate(mix: &RegimeMix, count: usize) -> Vec<(Family, usize)> {
    let total: f64 = Family::ALL.iter().map(|&f| mix.weight(f)).sum();
    let mut alloc: Vec<(Family, usize, f64)> = Family::ALL
        .iter()
        .map(|&f| {
            let exact = mix.weight(f) / total * count as f64;
            (f, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = alloc.iter().map(|a| a.1).sum();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].2.total_cmp(&alloc[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(count - assigned) {
        alloc[i].1 += 1;
    }
    alloc.into_iter().map(|(f, n, _)| (f, n)).collect()
}

fn series_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Structured component with unit scale, plus its parameters.
fn component(
    family: Family,
    len: usize,
    noise_level: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, GeneratorParams) {
    let mut p = GeneratorParams {
        family,
        label: family,
        level: 0.0,
        scale: 1.0,
        period: None,
        harmonics: Vec::new(),
        drift: 0.0,
        curvature: 0.0,
        spike_prob: 0.0,
        noise_sd: 0.0,
        secondary: None,
        mix_weight: 1.0,
    };
    let values = match family {
        Family::Seasonal => {
            let period = rng.random_range(4..=(len / 4).clamp(4, 48));
            p.period = Some(period);
            // Fundamental plus weaker harmonics, so the spectral peak sits at
            // the generating period.
            let n_harm = rng.random_range(1..=(period / 2).min(6));
            p.harmonics = (1..=n_harm)
                .map(|h| {
                    let amp = if h == 1 {
                        1.0
                    } else {
                        rng.random_range(0.3..0.85)
                    };
                    (amp, rng.random_range(0.0..2.0 * PI))
                })
                .collect();
            let shape: Vec<f64> = (0..period)
                .map(|t| {
                    p.harmonics
                        .iter()
                        .enumerate()
                        .map(|(h, (a, ph))| {
                            a * (2.0 * PI * (h + 1) as f64 * t as f64 / period as f64 + ph).sin()
                        })
                        .sum()
                })
                .collect();
            let m = shape.iter().sum::<f64>() / period as f64;
            let sd = (shape.iter().map(|v| (v - m).powi(2)).sum::<f64>() / period as f64)
                .sqrt()
                .max(1e-9);
            p.noise_sd = noise_level * rng.random_range(2.0..4.0);
            (0..len)
                .map(|t| (shape[t % period] - m) / sd + p.noise_sd * normal(rng))
                .collect()
        }
        Family::Trend => {
            p.drift = rng.random_range(3.0..8.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            p.curvature = rng.random_range(-0.5..0.5) * p.drift.abs();
            p.noise_sd = noise_level.max(0.05) * rng.random_range(3.0..10.0);
            (0..len)
                .map(|t| {
                    let u = t as f64 / (len - 1) as f64;
                    p.drift * u + p.curvature * (u * u - u) + p.noise_sd * normal(rng)
                })
                .collect()
        }
        Family::Sparse => {
            // Spikes arrive in bursts: a two-state on/off chain gates an iid
            // spike process, so some series carry low-frequency structure.
            let switch = rng.random_range(0.02..0.3);
            let on_share = rng.random_range(0.15..0.5);
            p.spike_prob = rng.random_range(0.2..0.6);
            let exp = Exp::new(1.0).expect("valid rate");
            let mut on = rng.random_bool(on_share);
            let mut v: Vec<f64> = (0..len)
                .map(|_| {
                    // stationary share of the on state is `on_share`
                    let flip = if on {
                        switch
                    } else {
                        switch * on_share / (1.0 - on_share)
                    };
                    if rng.random_bool(flip) {
                        on = !on;
                    }
                    if on && rng.random_bool(p.spike_prob) {
                        1.0 + 3.0 * exp.sample(rng)
                    } else {
                        0.0
                    }
                })
                .collect();
            // keep at least one spike so the series is not constant
            if v.iter().all(|&x| x == 0.0) {
                let i = rng.random_range(0..len);
                v[i] = 1.0 + 3.0 * exp.sample(rng);
            }
            v
        }
        Family::Noise => {
            p.noise_sd = 1.0;
            (0..len).map(|_| normal(rng)).collect()
        }
        Family::Composite => unreachable!("composite is assembled from two components"),
    };
    (values, p)
}

fn generate_one(
    family: Family,
    len: usize,
    noise_level: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, GeneratorParams) {
    let (base, mut params) = if family == Family::Composite {
        let mut fams = Family::SINGLE.to_vec();
        fams.shuffle(rng);
        let (a, b) = (fams[0], fams[1]);
        let w = rng.random_range(0.6..0.8);
        let (va, pa) = component(a, len, noise_level, rng);
        let (vb, pb) = component(b, len, noise_level, rng);
        let values = va
            .iter()
            .zip(&vb)
            .map(|(x, y)| w * x + (1.0 - w) * y)
            .collect();
        let params = GeneratorParams {
            family: Family::Composite,
            label: a,
            period: pa.period.or(pb.period),
            harmonics: if pa.harmonics.is_empty() {
                pb.harmonics
            } else {
                pa.harmonics
            },
            drift: pa.drift + pb.drift,
            curvature: pa.curvature + pb.curvature,
            spike_prob: pa.spike_prob.max(pb.spike_prob),
            noise_sd: pa.noise_sd.max(pb.noise_sd),
            secondary: Some(b),
            mix_weight: w,
            ..pa
        };
        (values, params)
    } else {
        component(family, len, noise_level, rng)
    };
    params.level = rng.random_range(-10.0..10.0);
    params.scale = rng.random_range(0.5..5.0);
    let values = base
        .iter()
        .map(|v| params.level + params.scale * v)
        .collect();
    (values, params)
}

/// Generate a labeled corpus. Output is a pure function of `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticSeries>> {
    spec.validate()?;
    let mut families: Vec<Family> = allocate(&spec.regime_mix, spec.count)
        .into_iter()
        .flat_map(|(f, n)| std::iter::repeat_n(f, n))
        .collect();
    let mut order_rng = series_rng(spec.seed, 0);
    families.shuffle(&mut order_rng);
    families
        .into_iter()
        .enumerate()
        .map(|(i, family)| {
            let mut rng = series_rng(spec.seed, i + 1);
            let (values, params) = generate_one(family, spec.length, spec.noise_level, &mut rng);
            let mut series = Series::new(format!("syn-{i:05}"), "synthetic", vec![values])?
                .with_label(params.label.name());
            if let Some(p) = params.period {
                series = series.with_period(p);
            }
            Ok(SyntheticSeries { series, params })
        })
        .collect()
}

pub fn into_dataset(items: Vec<SyntheticSeries>) -> Vec<Series<f64>> {
    items.into_iter().map(|s| s.series).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{sparsity, structural_profile};

    #[test]
    fn one_series_per_family() {
        let spec = SyntheticSpec::new(4, 128, 1).with_mix(RegimeMix::single_families());
        let out = gen_synthetic(&spec).unwrap();
        let mut labels: Vec<_> = out
            .iter()
            .map(|s| s.series.label.clone().unwrap())
            .collect();
        labels.sort();
        assert_eq!(labels, vec!["noise", "seasonal", "sparse", "trend"]);
    }

    #[test]
    fn deterministic_replay() {
        let spec = SyntheticSpec::new(20, 64, 42);
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let bits = |s: &SyntheticSeries| {
                s.series.variates[0]
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(x), bits(y));
            assert_eq!(x.params, y.params);
        }
        let c = gen_synthetic(&SyntheticSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a[0].series.variates, c[0].series.variates);
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_synthetic(&SyntheticSpec::new(0, 64, 0)).is_err());
        assert!(gen_synthetic(&SyntheticSpec::new(3, 8, 0)).is_err());
        let zero = RegimeMix {
            seasonal: 0.0,
            trend: 0.0,
            sparse: 0.0,
            noise: 0.0,
            composite: 0.0,
        };
        assert!(gen_synthetic(&SyntheticSpec::new(3, 64, 0).with_mix(zero)).is_err());
        let neg = RegimeMix {
            seasonal: -1.0,
            ..RegimeMix::default()
        };
        assert!(gen_synthetic(&SyntheticSpec::new(3, 64, 0).with_mix(neg)).is_err());
    }

    #[test]
    fn seasonal_period_bounds() {
        let spec = SyntheticSpec::new(200, 64, 3).with_mix(RegimeMix::only(Family::Seasonal));
        for s in gen_synthetic(&spec).unwrap() {
            let p = s.params.period.unwrap();
            assert!((4..=16).contains(&p));
            assert_eq!(s.series.period, Some(p));
        }
    }

    #[test]
    fn sparse_beats_noise_on_sparsity() {
        let mean_sparsity = |f: Family| {
            let spec = SyntheticSpec::new(1000, 128, 9).with_mix(RegimeMix::only(f));
            let out = gen_synthetic(&spec).unwrap();
            out.iter()
                .map(|s| sparsity(&s.series.variates[0]).unwrap())
                .sum::<f64>()
                / out.len() as f64
        };
        assert!(mean_sparsity(Family::Sparse) > mean_sparsity(Family::Noise));
    }

    #[test]
    fn matching_descriptor_separates_families() {
        let n = 500;
        let means: Vec<[f64; 4]> = Family::SINGLE
            .iter()
            .map(|&f| {
                let spec = SyntheticSpec::new(n, 256, 17).with_mix(RegimeMix::only(f));
                let mut acc = [0.0; 4];
                for s in gen_synthetic(&spec).unwrap() {
                    let p = structural_profile(&s.series.variates[0])
                        .unwrap()
                        .to_array();
                    for d in 0..4 {
                        acc[d] += p[d] / n as f64;
                    }
                }
                acc
            })
            .collect();
        for (fi, &f) in Family::SINGLE.iter().enumerate() {
            let d = f.descriptor().unwrap().index();
            let row = means[fi];
            let best = (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best, d, "{f:?} mean profile {row:?}");
        }
    }
}
