//! Analytical structural descriptors: forecastability, seasonality strength,
//! trend strength and sparsity, plus rank normalization and correlation
//! analysis over profile collections.

mod decompose;
mod quantile;
mod spectrum;

pub use decompose::{decompose, Decomposition};
pub use quantile::QuantileNormalizer;
pub use spectrum::{detrend, dominant_period, ols_line, power_spectrum, PowerSpectrum, POWER_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{AmeError, Result};
use crate::scalar::Scalar;

/// Number of structural descriptors.
pub const N_DESCRIPTORS: usize = 4;

/// Quantization step for counting unique values.
pub const UNIQUE_QUANTUM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Descriptor {
    Forecastability,
    Seasonality,
    Trend,
    Sparsity,
}

impl Descriptor {
    pub const ALL: [Descriptor; 4] = [
        Descriptor::Forecastability,
        Descriptor::Seasonality,
        Descriptor::Trend,
        Descriptor::Sparsity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Descriptor::Forecastability => "forecastability",
            Descriptor::Seasonality => "seasonality",
            Descriptor::Trend => "trend",
            Descriptor::Sparsity => "sparsity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }
}

/// Four scores in `[0, 1]`: forecastability, seasonality, trend, sparsity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeProfile<T = f64> {
    pub r_f: T,
    pub r_s: T,
    pub r_t: T,
    pub r_sp: T,
}

impl<T: Scalar> RegimeProfile<T> {
    pub fn from_array(a: [T; 4]) -> Self {
        RegimeProfile {
            r_f: a[0],
            r_s: a[1],
            r_t: a[2],
            r_sp: a[3],
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.r_f, self.r_s, self.r_t, self.r_sp]
    }

    pub fn get(&self, d: Descriptor) -> T {
        self.to_array()[d.index()]
    }

    pub fn cast<U: Scalar>(&self) -> RegimeProfile<U> {
        RegimeProfile::from_array(self.to_array().map(|v| U::c(v.f64())))
    }

    pub fn is_valid(&self) -> bool {
        self.to_array()
            .iter()
            .all(|&v| v.is_finite() && v >= T::zero() && v <= T::one())
    }
}

fn require_len(x: &[impl Sized], needed: usize) -> Result<()> {
    if x.len() < needed {
        return Err(AmeError::SeriesTooShort {
            needed,
            got: x.len(),
        });
    }
    Ok(())
}

/// One minus the normalized Shannon entropy of the power spectrum.
///
/// Only the mean is removed (the DC bin is excluded from the spectrum).
/// Subtracting a fitted line would leak power from exact-bin sinusoids into
/// every other bin.
pub fn forecastability<T: Scalar>(x: &[T]) -> Result<T> {
    require_len(x, 4)?;
    let spec = power_spectrum(x, false)?;
    Ok(forecastability_from_spectrum(&spec))
}

pub fn forecastability_from_spectrum<T: Scalar>(spec: &PowerSpectrum<T>) -> T {
    if spec.is_degenerate() || spec.n_bins() < 2 {
        return T::one();
    }
    let entropy: T = spec
        .normalized()
        .into_iter()
        .filter(|&p| p > T::zero())
        .map(|p| -p * p.ln())
        .sum();
    let max_entropy = T::from_usize_lossy(spec.n_bins()).ln();
    (T::one() - entropy / max_entropy)
        .max(T::zero())
        .min(T::one())
}

fn variance<T: Scalar>(x: &[T]) -> T {
    let n = T::from_usize_lossy(x.len());
    let m = x.iter().copied().sum::<T>() / n;
    x.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n
}

/// `clamp(1 - Var(R) / Var(S + R), 0, 1)` with the period taken from the
/// dominant peak of the detrended spectrum.
pub fn seasonality_strength<T: Scalar>(x: &[T]) -> Result<T> {
    require_len(x, 8)?;
    let spec = power_spectrum(x, true)?;
    let Ok(period) = dominant_period(&spec, x.len()) else {
        return Ok(T::zero());
    };
    let Ok(d) = decompose(x, period) else {
        return Ok(T::zero());
    };
    let detrended: Vec<T> = d
        .seasonal
        .iter()
        .zip(&d.residual)
        .map(|(&s, &r)| s + r)
        .collect();
    let denom = variance(&detrended);
    // Relative to the input scale so the rule is invariant to rescaling.
    let eps = T::c(POWER_EPS) * variance(x).max(T::min_positive_value());
    if denom < T::c(POWER_EPS) || denom <= eps {
        return Ok(T::zero());
    }
    Ok((T::one() - variance(&d.residual) / denom)
        .max(T::zero())
        .min(T::one()))
}

/// `min(1, |slope| * T)` of the min-max normalized series.
pub fn trend_strength<T: Scalar>(x: &[T]) -> Result<T> {
    require_len(x, 2)?;
    let lo = x.iter().copied().fold(T::infinity(), T::min);
    let hi = x.iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    if range <= T::zero() {
        return Ok(T::zero());
    }
    let scaled: Vec<T> = x.iter().map(|&v| (v - lo) / range).collect();
    let (slope, _) = ols_line(&scaled);
    Ok((slope.abs() * T::from_usize_lossy(x.len())).min(T::one()))
}

/// `1 - N_unique / T` with values quantized to [`UNIQUE_QUANTUM`].
pub fn sparsity<T: Scalar>(x: &[T]) -> Result<T> {
    require_len(x, 1)?;
    let mut q: Vec<f64> = x
        .iter()
        .map(|v| (v.f64() / UNIQUE_QUANTUM).round())
        .collect();
    q.sort_by(f64::total_cmp);
    q.dedup();
    Ok(T::one() - T::from_usize_lossy(q.len()) / T::from_usize_lossy(x.len()))
}

/// All four analytical descriptors.
pub fn structural_profile<T: Scalar>(x: &[T]) -> Result<RegimeProfile<T>> {
    require_len(x, 8)?;
    Ok(RegimeProfile {
        r_f: forecastability(x)?,
        r_s: seasonality_strength(x)?,
        r_t: trend_strength(x)?,
        r_sp: sparsity(x)?,
    })
}

/// Pearson correlation matrix of the four descriptors.
pub fn descriptor_correlation<T: Scalar>(profiles: &[RegimeProfile<T>]) -> Result<[[f64; 4]; 4]> {
    if profiles.len() < 3 {
        return Err(AmeError::InsufficientData(format!(
            "correlation needs at least 3 profiles, got {}",
            profiles.len()
        )));
    }
    let n = profiles.len() as f64;
    let cols: Vec<Vec<f64>> = Descriptor::ALL
        .iter()
        .map(|&d| profiles.iter().map(|p| p.get(d).f64()).collect())
        .collect();
    let centred: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let norms: Vec<f64> = centred
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    for (d, &nrm) in Descriptor::ALL.iter().zip(&norms) {
        if nrm <= 1e-12 {
            return Err(AmeError::ZeroVariance(d.name()));
        }
    }
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        out[i][i] = 1.0;
        for j in i + 1..4 {
            let dot: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    Ok(out)
}
