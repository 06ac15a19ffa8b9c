use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{AmeError, Result};
use crate::scalar::Scalar;

/// Total power below which a spectrum is treated as empty.
pub const POWER_EPS: f64 = 1e-12;

/// Squared DFT magnitudes at the positive frequencies `1..=floor(T/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum<T = f64> {
    pub bins: Vec<T>,
    pub total_power: T,
}

impl<T: Scalar> PowerSpectrum<T> {
    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.total_power < T::c(POWER_EPS)
    }

    /// Bins divided by the total power; all zeros for an empty spectrum.
    pub fn normalized(&self) -> Vec<T> {
        if self.is_degenerate() {
            return vec![T::zero(); self.bins.len()];
        }
        self.bins.iter().map(|&b| b / self.total_power).collect()
    }
}

/// Least-squares slope and intercept of `x` against `t = 0..T-1`.
pub fn ols_line<T: Scalar>(x: &[T]) -> (T, T) {
    let n = T::from_usize_lossy(x.len());
    let t_mean = (n - T::one()) / T::c(2.0);
    let x_mean = x.iter().copied().sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for (i, &v) in x.iter().enumerate() {
        let dt = T::from_usize_lossy(i) - t_mean;
        sxy += dt * (v - x_mean);
        sxx += dt * dt;
    }
    let slope = if sxx > T::zero() {
        sxy / sxx
    } else {
        T::zero()
    };
    (slope, x_mean - slope * t_mean)
}

/// Subtract the least-squares line.
pub fn detrend<T: Scalar>(x: &[T]) -> Vec<T> {
    let (slope, icpt) = ols_line(x);
    x.iter()
        .enumerate()
        .map(|(i, &v)| v - (icpt + slope * T::from_usize_lossy(i)))
        .collect()
}

pub fn power_spectrum<T: Scalar>(x: &[T], detrend_first: bool) -> Result<PowerSpectrum<T>> {
    let n = x.len();
    if n < 4 {
        return Err(AmeError::SeriesTooShort { needed: 4, got: n });
    }
    let input = if detrend_first {
        detrend(x)
    } else {
        x.to_vec()
    };
    let mut buf: Vec<Complex<T>> = input.iter().map(|&v| Complex::new(v, T::zero())).collect();
    let fft = FftPlanner::<T>::new().plan_fft_forward(n);
    fft.process(&mut buf);
    let bins: Vec<T> = buf[1..=n / 2].iter().map(|c| c.norm_sqr()).collect();
    let total_power = bins.iter().copied().sum();
    Ok(PowerSpectrum { bins, total_power })
}

/// Period of the strongest bin, `round(T / k)`, clamped to `[2, T/2]`.
/// Bins within a relative 1e-9 of the maximum count as ties and resolve to
/// the lowest frequency.
pub fn dominant_period<T: Scalar>(spec: &PowerSpectrum<T>, len: usize) -> Result<usize> {
    if spec.is_degenerate() {
        return Err(AmeError::DegenerateSpectrum);
    }
    let max = spec.bins.iter().copied().fold(T::zero(), T::max);
    let tol = max * T::c(1e-9);
    let k = spec
        .bins
        .iter()
        .position(|&b| b >= max - tol)
        .expect("nonempty spectrum")
        + 1;
    let period = (len as f64 / k as f64).round() as usize;
    Ok(period.clamp(2, (len / 2).max(2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// O(T^2) direct DFT, independent of the FFT path.
    fn direct_power(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (1..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    fn sinusoid(period: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|t| (2.0 * PI * t as f64 / period).sin())
            .collect()
    }

    #[test]
    fn exact_bin_concentration() {
        let x: Vec<f64> = (0..64)
            .map(|t| (2.0 * PI * 4.0 * t as f64 / 64.0).sin())
            .collect();
        let s = power_spectrum(&x, false).unwrap();
        assert_eq!(s.n_bins(), 32);
        assert!((s.bins[3] - s.total_power).abs() <= 1e-8 * s.total_power);
    }

    #[test]
    fn constant_has_no_power_after_detrend() {
        let s = power_spectrum(&[3.5; 40], true).unwrap();
        assert!(s.total_power < 1e-12);
    }

    #[test]
    fn too_short() {
        assert!(power_spectrum(&[1.0, 2.0, 3.0], false).is_err());
    }

    #[test]
    fn matches_direct_dft() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(4..200);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = power_spectrum(&x, false).unwrap();
            let d = direct_power(&x);
            let total: f64 = d.iter().sum();
            assert!((s.total_power - total).abs() <= 1e-8 * total.max(1e-300));
            for (a, b) in s.bins.iter().zip(&d) {
                assert!((a - b).abs() <= 1e-8 * total);
            }
        }
    }

    #[test]
    fn dominant_period_cases() {
        let s = power_spectrum(&sinusoid(8.0, 64), true).unwrap();
        assert_eq!(dominant_period(&s, 64).unwrap(), 8);
        let s = power_spectrum(&sinusoid(3.0, 64), true).unwrap();
        assert_eq!(dominant_period(&s, 64).unwrap(), 3);
        let x: Vec<f64> = sinusoid(8.0, 64)
            .iter()
            .zip(sinusoid(4.0, 64))
            .map(|(a, b)| a + b)
            .collect();
        let s = power_spectrum(&x, false).unwrap();
        assert_eq!(dominant_period(&s, 64).unwrap(), 8);
    }

    #[test]
    fn dominant_period_degenerate() {
        let s = power_spectrum(&[1.0; 16], true).unwrap();
        assert!(matches!(
            dominant_period(&s, 16),
            Err(AmeError::DegenerateSpectrum)
        ));
    }
}
