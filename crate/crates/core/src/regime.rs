//! Learned regime-profile estimator trained on analytically labeled crops.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::descriptors::{
    power_spectrum, structural_profile, Descriptor, QuantileNormalizer, RegimeProfile,
    UNIQUE_QUANTUM,
};
use crate::error::{AmeError, Result};
use crate::parallel::par_map;
use crate::scalar::{digest, sigmoid};
use crate::series::Series;

/// Downsampled value points in the feature vector.
pub const FEATURE_POINTS: usize = 64;
/// Leading spectrum bins in the feature vector.
pub const FEATURE_BINS: usize = 32;
/// Autocorrelation lags in the summary block.
pub const FEATURE_LAGS: usize = 16;
/// Value points, spectrum bins, autocorrelations and the distinct-value share.
pub const N_FEATURES: usize = FEATURE_POINTS + FEATURE_BINS + FEATURE_LAGS + 1;
pub const DEFAULT_L_CAP: usize = 192;
pub const MIN_INPUT: usize = 8;

/// A training crop with its quantile-normalized analytical profile.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCrop {
    pub values: Vec<f64>,
    pub targets: RegimeProfile<f64>,
}

/// Sample `n_crops` crops uniformly over series, variates and offsets, label
/// them analytically and normalize the labels by their own empirical ranks.
pub fn build_label_table(
    dataset: &[Series<f64>],
    n_crops: usize,
    crop_len: usize,
    seed: u64,
) -> Result<(Vec<LabeledCrop>, QuantileNormalizer)> {
    if crop_len < MIN_INPUT || crop_len > DEFAULT_L_CAP {
        return Err(AmeError::invalid(format!(
            "crop_len must be in {MIN_INPUT}..={DEFAULT_L_CAP}, got {crop_len}"
        )));
    }
    if dataset.is_empty() {
        return Err(AmeError::EmptyDataset);
    }
    let eligible: Vec<&Series<f64>> = dataset.iter().filter(|s| s.len() >= crop_len).collect();
    if eligible.is_empty() {
        return Err(AmeError::InsufficientData(format!(
            "no series has {crop_len} values"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<Vec<f64>> = (0..n_crops)
        .map(|_| {
            let s = eligible[rng.random_range(0..eligible.len())];
            let v = &s.variates[rng.random_range(0..s.n_variates())];
            let off = rng.random_range(0..=v.len() - crop_len);
            v[off..off + crop_len].to_vec()
        })
        .collect();
    let profiles = par_map(&raw, |x| structural_profile(x))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let norm = QuantileNormalizer::fit(&profiles)?;
    let crops = raw
        .into_iter()
        .zip(&profiles)
        .map(|(values, p)| LabeledCrop {
            values,
            targets: norm.apply(p),
        })
        .collect();
    Ok((crops, norm))
}

/// Linear interpolation of `x` onto `n` evenly spaced points.
fn resample(x: &[f64], n: usize) -> Vec<f64> {
    if x.len() == n {
        return x.to_vec();
    }
    let scale = (x.len() - 1) as f64 / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let pos = i as f64 * scale;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(x.len() - 1);
            let frac = pos - lo as f64;
            x[lo] * (1.0 - frac) + x[hi] * frac
        })
        .collect()
}

/// Raw feature vector: the most recent `l_cap` values, z-scored and
/// resampled, then the leading normalized spectrum bins, the sample
/// autocorrelations and the share of distinct values.
pub fn features(x: &[f64], l_cap: usize) -> Result<Vec<f64>> {
    if x.len() < MIN_INPUT {
        return Err(AmeError::SeriesTooShort {
            needed: MIN_INPUT,
            got: x.len(),
        });
    }
    let x = &x[x.len().saturating_sub(l_cap)..];
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let z: Vec<f64> = if sd > 1e-12 {
        x.iter().map(|v| (v - mean) / sd).collect()
    } else {
        vec![0.0; x.len()]
    };
    let mut out = resample(&z, FEATURE_POINTS);
    let spec = power_spectrum(x, false)?;
    let nb = spec.n_bins() as f64;
    // rescaled so a flat spectrum sits at ln 2 in every bin
    let bins = spec.normalized();
    out.extend((0..FEATURE_BINS).map(|i| bins.get(i).map_or(0.0, |&p| (p * nb).ln_1p())));
    out.extend((1..=FEATURE_LAGS).map(|lag| {
        if lag >= z.len() {
            return 0.0;
        }
        z.iter().zip(&z[lag..]).map(|(a, b)| a * b).sum::<f64>() / z.len() as f64
    }));
    let mut q: Vec<i64> = x
        .iter()
        .map(|v| (v / UNIQUE_QUANTUM).round() as i64)
        .collect();
    q.sort_unstable();
    q.dedup();
    out.push(q.len() as f64 / x.len() as f64);
    Ok(out)
}

/// One-hidden-layer regressor with a sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl Regressor {
    fn init(n_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let sd = (1.0 / n_in as f64).sqrt();
        let n1 = Normal::new(0.0, sd).expect("finite sd");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("finite sd");
        Regressor {
            w1: Array2::from_shape_simple_fn((n_in, hidden), || n1.sample(rng)),
            b1: Array1::zeros(hidden),
            w2: Array1::from_shape_simple_fn(hidden, || n2.sample(rng)),
            b2: 0.0,
        }
    }

    fn zeros_like(&self) -> Self {
        Regressor {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array1::zeros(self.w2.len()),
            b2: 0.0,
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let h = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let out = (h.dot(&self.w2) + self.b2).mapv(sigmoid);
        (h, out)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Array1<f64> {
        self.forward(x).1
    }

    /// Mean squared error and its gradient on one batch.
    fn loss_grad(&self, x: &Array2<f64>, y: &Array1<f64>) -> (f64, Regressor) {
        let (h, out) = self.forward(x);
        let b = y.len() as f64;
        let err = &out - y;
        let loss = err.mapv(|e| e * e).sum() / b;
        let dz = &err * &out * &out.mapv(|o| 1.0 - o) * (2.0 / b);
        let mut dpre = dz
            .clone()
            .insert_axis(Axis(1))
            .dot(&self.w2.view().insert_axis(Axis(0)));
        dpre.zip_mut_with(&h, |g, &a| *g *= 1.0 - a * a);
        let g = Regressor {
            w1: x.t().dot(&dpre).as_standard_layout().into_owned(),
            b1: dpre.sum_axis(Axis(0)),
            w2: h.t().dot(&dz),
            b2: dz.sum(),
        };
        (loss, g)
    }

    fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.b2),
        ]
    }

    pub fn checksum(&self) -> u64 {
        digest(
            self.w1
                .iter()
                .chain(&self.b1)
                .chain(&self.w2)
                .chain(std::iter::once(&self.b2))
                .map(|v| v.to_bits()),
        )
    }
}

/// Adam state for one regressor.
struct Adam {
    m: Regressor,
    v: Regressor,
    t: i32,
}

impl Adam {
    fn new(p: &Regressor) -> Self {
        Adam {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, p: &mut Regressor, g: &mut Regressor, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let ps = p.params_mut();
        let gs = g.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeTrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub l_cap: usize,
    pub seed: u64,
}

impl Default for RegimeTrainConfig {
    fn default() -> Self {
        RegimeTrainConfig {
            hidden: 32,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 300,
            patience: 15,
            val_fraction: 0.2,
            l_cap: DEFAULT_L_CAP,
            seed: 0,
        }
    }
}

impl RegimeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(AmeError::invalid(
                "hidden, batch_size and max_epochs must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AmeError::invalid("lr must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(AmeError::invalid("val_fraction must lie in (0, 1)"));
        }
        if self.l_cap < MIN_INPUT {
            return Err(AmeError::invalid(format!(
                "l_cap must be at least {MIN_INPUT}"
            )));
        }
        Ok(())
    }
}

/// Four independent per-descriptor regressors over a shared feature scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimePredictor {
    pub regressors: Vec<Regressor>,
    pub feature_mean: Vec<f64>,
    pub feature_sd: Vec<f64>,
    pub l_cap: usize,
    pub normalizer: QuantileNormalizer,
    pub frozen: bool,
}

impl RegimePredictor {
    fn feature_matrix(&self, rows: &[Vec<f64>]) -> Array2<f64> {
        let mut m = Array2::zeros((rows.len(), N_FEATURES));
        for (i, r) in rows.iter().enumerate() {
            for j in 0..N_FEATURES {
                m[[i, j]] = (r[j] - self.feature_mean[j]) / self.feature_sd[j];
            }
        }
        m
    }

    pub fn predict_profile(&self, x: &[f64]) -> Result<RegimeProfile<f64>> {
        let f = features(x, self.l_cap)?;
        let m = self.feature_matrix(std::slice::from_ref(&f));
        Ok(RegimeProfile::from_array(std::array::from_fn(|d| {
            self.regressors[d].predict(&m)[0]
        })))
    }

    /// Mutable access to the regressors; refused once frozen.
    pub fn regressors_mut(&mut self) -> Result<&mut [Regressor]> {
        if self.frozen {
            return Err(AmeError::Frozen);
        }
        Ok(&mut self.regressors)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn checksum(&self) -> u64 {
        let scaler = self
            .feature_mean
            .iter()
            .chain(&self.feature_sd)
            .map(|v| v.to_bits());
        digest(
            self.regressors
                .iter()
                .map(Regressor::checksum)
                .chain(scaler),
        )
    }
}

/// Per-descriptor fit summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeTrainReport {
    pub train_mse: [f64; 4],
    pub val_mse: [f64; 4],
    pub val_spearman: [f64; 4],
    pub best_epoch: [usize; 4],
}

/// Held-out split of a crop table: indices `(train, validation)`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5711));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

struct FitResult {
    model: Regressor,
    train_mse: f64,
    val_mse: f64,
    best_epoch: usize,
}

fn fit_one(
    x_tr: &Array2<f64>,
    y_tr: &Array1<f64>,
    x_va: &Array2<f64>,
    y_va: &Array1<f64>,
    cfg: &RegimeTrainConfig,
    seed: u64,
) -> Result<FitResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Regressor::init(x_tr.ncols(), cfg.hidden, &mut rng);
    let mut adam = Adam::new(&model);
    let mse = |m: &Regressor, x: &Array2<f64>, y: &Array1<f64>| {
        (m.predict(x) - y).mapv(|e| e * e).mean().unwrap_or(0.0)
    };
    let mut best = (mse(&model, x_va, y_va), model.clone(), 0);
    let mut order: Vec<usize> = (0..y_tr.len()).collect();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x_tr.select(Axis(0), chunk);
            let yb = y_tr.select(Axis(0), chunk);
            let (loss, mut g) = model.loss_grad(&xb, &yb);
            if !loss.is_finite() {
                return Err(AmeError::Divergence { step: epoch });
            }
            adam.step(&mut model, &mut g, cfg.lr);
        }
        let v = mse(&model, x_va, y_va);
        if !v.is_finite() {
            return Err(AmeError::Divergence { step: epoch });
        }
        if v < best.0 {
            best = (v, model.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (val_mse, model, best_epoch) = best;
    Ok(FitResult {
        train_mse: mse(&model, x_tr, y_tr),
        model,
        val_mse,
        best_epoch,
    })
}

/// Train the four regressors on MSE with early stopping on a held-out split
/// and return the predictor frozen.
pub fn train_regime_predictor(
    crops: &[LabeledCrop],
    normalizer: &QuantileNormalizer,
    cfg: &RegimeTrainConfig,
) -> Result<(RegimePredictor, RegimeTrainReport)> {
    cfg.validate()?;
    if crops.len() < 100 {
        return Err(AmeError::InsufficientData(format!(
            "need at least 100 crops, got {}",
            crops.len()
        )));
    }
    let feats = par_map(crops, |c| features(&c.values, cfg.l_cap))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (tr, va) = split_indices(crops.len(), cfg.val_fraction, cfg.seed);
    let mut feature_mean = vec![0.0; N_FEATURES];
    let mut feature_sd = vec![0.0; N_FEATURES];
    for j in 0..N_FEATURES {
        let n = tr.len() as f64;
        let m = tr.iter().map(|&i| feats[i][j]).sum::<f64>() / n;
        let v = tr.iter().map(|&i| (feats[i][j] - m).powi(2)).sum::<f64>() / n;
        feature_mean[j] = m;
        feature_sd[j] = v.sqrt().max(1e-8);
    }
    let mut pred = RegimePredictor {
        regressors: Vec::new(),
        feature_mean,
        feature_sd,
        l_cap: cfg.l_cap,
        normalizer: normalizer.clone(),
        frozen: false,
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| feats[i].clone()).collect::<Vec<_>>();
    let x_tr = pred.feature_matrix(&pick(&tr));
    let x_va = pred.feature_matrix(&pick(&va));
    let target = |idx: &[usize], d: Descriptor| {
        idx.iter()
            .map(|&i| crops[i].targets.get(d))
            .collect::<Array1<f64>>()
    };
    let fits = par_map(&Descriptor::ALL, |&d| {
        fit_one(
            &x_tr,
            &target(&tr, d),
            &x_va,
            &target(&va, d),
            cfg,
            cfg.seed.wrapping_add(d.index() as u64 + 1),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut report = RegimeTrainReport {
        train_mse: [0.0; 4],
        val_mse: [0.0; 4],
        val_spearman: [0.0; 4],
        best_epoch: [0; 4],
    };
    for (d, f) in Descriptor::ALL.into_iter().zip(fits) {
        let k = d.index();
        report.train_mse[k] = f.train_mse;
        report.val_mse[k] = f.val_mse;
        report.best_epoch[k] = f.best_epoch;
        let p = f.model.predict(&x_va);
        report.val_spearman[k] = spearman(
            p.as_slice().expect("contiguous"),
            target(&va, d).as_slice().expect("contiguous"),
        );
        pred.regressors.push(f.model);
    }
    pred.freeze();
    Ok((pred, report))
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Where the per-variate regime profile comes from during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeSource {
    /// A frozen learned predictor.
    Learned(Box<RegimePredictor>),
    /// Analytical descriptors mapped through a fitted normalizer.
    Oracle(QuantileNormalizer),
}

impl RegimeSource {
    pub fn profile(&self, x: &[f64]) -> Result<RegimeProfile<f64>> {
        match self {
            RegimeSource::Learned(p) => p.predict_profile(x),
            RegimeSource::Oracle(n) => {
                if x.len() < MIN_INPUT {
                    return Err(AmeError::SeriesTooShort {
                        needed: MIN_INPUT,
                        got: x.len(),
                    });
                }
                let x = &x[x.len().saturating_sub(DEFAULT_L_CAP)..];
                Ok(n.apply(&structural_profile(x)?))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RegimeSource::Learned(_) => "learned",
            RegimeSource::Oracle(_) => "oracle",
        }
    }
}
