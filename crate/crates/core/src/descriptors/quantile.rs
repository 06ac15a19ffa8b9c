use serde::{Deserialize, Serialize};

use super::{Descriptor, RegimeProfile};
use crate::error::{AmeError, Result};
use crate::scalar::Scalar;

/// Per-descriptor empirical-rank transform fitted on a reference sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileNormalizer {
    /// Sorted reference values, one array per descriptor.
    pub reference: [Vec<f64>; 4],
}

impl QuantileNormalizer {
    pub fn fit<T: Scalar>(profiles: &[RegimeProfile<T>]) -> Result<Self> {
        if profiles.len() < 2 {
            return Err(AmeError::EmptyFit {
                needed: 2,
                got: profiles.len(),
            });
        }
        let reference = Descriptor::ALL.map(|d| {
            let mut col: Vec<f64> = profiles.iter().map(|p| p.get(d).f64()).collect();
            col.sort_by(f64::total_cmp);
            col
        });
        Ok(QuantileNormalizer { reference })
    }

    pub fn from_reference(reference: [Vec<f64>; 4]) -> Result<Self> {
        if reference.iter().any(Vec::is_empty) {
            return Err(AmeError::EmptyFit { needed: 1, got: 0 });
        }
        let mut reference = reference;
        for col in &mut reference {
            col.sort_by(f64::total_cmp);
        }
        Ok(QuantileNormalizer { reference })
    }

    /// Mid-rank of `v` in the reference column of `d`.
    pub fn rank(&self, d: Descriptor, v: f64) -> f64 {
        let col = &self.reference[d.index()];
        let below = col.partition_point(|&r| r < v);
        let not_above = col.partition_point(|&r| r <= v);
        (below as f64 + 0.5 * (not_above - below) as f64) / col.len() as f64
    }

    pub fn apply<T: Scalar>(&self, profile: &RegimeProfile<T>) -> RegimeProfile<T> {
        RegimeProfile::from_array(Descriptor::ALL.map(|d| T::c(self.rank(d, profile.get(d).f64()))))
    }
}
