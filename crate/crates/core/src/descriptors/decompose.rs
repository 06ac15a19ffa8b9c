use crate::error::{AmeError, Result};
use crate::scalar::Scalar;

/// Additive split `x = trend + seasonal + residual`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<T = f64> {
    pub trend: Vec<T>,
    pub seasonal: Vec<T>,
    pub residual: Vec<T>,
    pub period: usize,
}

/// Centered moving average of width `period` (a 2x`period` average for even
/// widths). Positions without a full window take the nearest valid value.
fn centered_moving_average<T: Scalar>(x: &[T], period: usize) -> Vec<T> {
    let n = x.len();
    let half = period / 2;
    let p = T::from_usize_lossy(period);
    let mut out = vec![T::zero(); n];
    let (first, last) = (half, n - 1 - half);
    for t in first..=last {
        out[t] = if period % 2 == 1 {
            x[t - half..=t + half].iter().copied().sum::<T>() / p
        } else {
            let inner: T = x[t - half + 1..t + half].iter().copied().sum();
            (inner + (x[t - half] + x[t + half]) / T::c(2.0)) / p
        };
    }
    for t in 0..first {
        out[t] = out[first];
    }
    for t in last + 1..n {
        out[t] = out[last];
    }
    out
}

/// Classical decomposition: moving-average trend plus per-phase seasonal
/// means, re-centered to zero.
pub fn decompose<T: Scalar>(x: &[T], period: usize) -> Result<Decomposition<T>> {
    if period < 1 || x.len() < 2 * period {
        return Err(AmeError::PeriodTooLarge {
            period,
            len: x.len(),
        });
    }
    let trend = centered_moving_average(x, period);
    let mut sums = vec![T::zero(); period];
    let mut counts = vec![0usize; period];
    for (t, (&v, &tr)) in x.iter().zip(&trend).enumerate() {
        sums[t % period] += v - tr;
        counts[t % period] += 1;
    }
    let phase: Vec<T> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| s / T::from_usize_lossy(c))
        .collect();
    let centre = phase.iter().copied().sum::<T>() / T::from_usize_lossy(period);
    let seasonal: Vec<T> = (0..x.len()).map(|t| phase[t % period] - centre).collect();
    let residual = x
        .iter()
        .zip(&trend)
        .zip(&seasonal)
        .map(|((&v, &tr), &s)| v - tr - s)
        .collect();
    Ok(Decomposition {
        trend,
        seasonal,
        residual,
        period,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn var(x: &[f64]) -> f64 {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn sinusoid_is_mostly_seasonal() {
        let x: Vec<f64> = (0..64).map(|t| (2.0 * PI * t as f64 / 8.0).sin()).collect();
        let d = decompose(&x, 8).unwrap();
        assert!(var(&d.residual) / var(&x) < 0.05);
    }

    #[test]
    fn constant_is_all_trend() {
        let d = decompose(&[4.0f64; 30], 5).unwrap();
        assert!(d.seasonal.iter().all(|v| v.abs() < 1e-12));
        assert!(d.residual.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn period_too_large() {
        assert!(matches!(
            decompose(&[1.0; 9], 5),
            Err(AmeError::PeriodTooLarge { .. })
        ));
    }

    proptest! {
        #[test]
        fn reconstruction_identity(x in prop::collection::vec(-100.0f64..100.0, 8..120), p in 1usize..8) {
            prop_assume!(x.len() >= 2 * p);
            let d = decompose(&x, p).unwrap();
            for t in 0..x.len() {
                prop_assert!((d.trend[t] + d.seasonal[t] + d.residual[t] - x[t]).abs() < 1e-8);
            }
        }
    }
}
