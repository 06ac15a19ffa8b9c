//! Series-level soft prior over experts, built from a regime profile.
//!
//! Specialized experts are anchored to descriptors round-robin; shared
//! experts receive a gated share of the mass that grows when the profile is
//! uncertain and shrinks when any descriptor is strongly activated.

use serde::{Deserialize, Serialize};

use crate::descriptors::{Descriptor, RegimeProfile, N_DESCRIPTORS};
use crate::error::{AmeError, Result};
use crate::scalar::{sigmoid, Scalar};

/// Below this, a profile counts as all-zero and the specialized prior falls
/// back to uniform.
pub const ZERO_PROFILE_EPS: f64 = 1e-12;

/// Assignment of specialized experts to descriptors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorMap {
    n_specialized: usize,
    n_shared: usize,
    assignment: [Vec<usize>; N_DESCRIPTORS],
}

impl AnchorMap {
    /// Descriptor `d` receives experts `d, d + 4, d + 8, ...`.
    pub fn new(n_specialized: usize, n_shared: usize) -> Result<Self> {
        if n_specialized < N_DESCRIPTORS {
            return Err(AmeError::TooFewExperts(n_specialized));
        }
        let assignment =
            std::array::from_fn(|d| (d..n_specialized).step_by(N_DESCRIPTORS).collect());
        Ok(AnchorMap {
            n_specialized,
            n_shared,
            assignment,
        })
    }

    pub fn n_specialized(&self) -> usize {
        self.n_specialized
    }

    pub fn n_shared(&self) -> usize {
        self.n_shared
    }

    pub fn n_experts(&self) -> usize {
        self.n_specialized + self.n_shared
    }

    pub fn experts_for(&self, d: Descriptor) -> &[usize] {
        &self.assignment[d.index()]
    }

    /// Shared experts occupy the indices after the specialized block.
    pub fn shared_experts(&self) -> std::ops::Range<usize> {
        self.n_specialized..self.n_experts()
    }

    pub fn is_shared(&self, e: usize) -> bool {
        e >= self.n_specialized && e < self.n_experts()
    }

    /// Anchoring descriptor of expert `e`, `None` for shared experts.
    pub fn descriptor_of(&self, e: usize) -> Option<Descriptor> {
        (e < self.n_specialized).then(|| Descriptor::ALL[e % N_DESCRIPTORS])
    }

    /// Group label per expert: descriptor index for specialized experts and
    /// 4 for every shared expert.
    pub fn group_of(&self, e: usize) -> usize {
        self.descriptor_of(e)
            .map_or(N_DESCRIPTORS, Descriptor::index)
    }
}

/// Shared-gate parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams<T = f64> {
    pub alpha: T,
    pub b: T,
    pub learnable: bool,
}

impl<T: Scalar> Default for GateParams<T> {
    fn default() -> Self {
        GateParams {
            alpha: T::c(4.0),
            b: T::c(2.0),
            learnable: false,
        }
    }
}

impl<T: Scalar> GateParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > T::zero()) {
            return Err(AmeError::invalid("gate alpha must be finite and positive"));
        }
        if !self.b.is_finite() {
            return Err(AmeError::invalid("gate b must be finite"));
        }
        Ok(())
    }
}

/// Prior over all experts, specialized indices first.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPrior<T = f64> {
    pub probs: Vec<T>,
    pub pi_shared: T,
}

impl<T: Scalar> ExpertPrior<T> {
    /// `dq_e / dπ_sh` for every expert.
    pub fn dq_dpi(&self, map: &AnchorMap) -> Vec<T> {
        if map.n_shared() == 0 {
            return vec![T::zero(); map.n_experts()];
        }
        let one_minus = T::one() - self.pi_shared;
        let share = T::one() / T::from_usize_lossy(map.n_shared());
        (0..map.n_experts())
            .map(|e| {
                if map.is_shared(e) {
                    share
                } else if one_minus > T::zero() {
                    -self.probs[e] / one_minus
                } else {
                    T::zero()
                }
            })
            .collect()
    }
}

/// Profile scores with dropped descriptors zeroed.
fn active_scores<T: Scalar>(profile: &RegimeProfile<T>, drop: Option<Descriptor>) -> [T; 4] {
    let mut g = profile.to_array();
    if let Some(d) = drop {
        g[d.index()] = T::zero();
    }
    g
}

/// `q_sp(e) ∝ Σ_d q_anchor(e | d) g_d`, uniform when every score vanishes.
pub fn specialized_prior<T: Scalar>(profile: &RegimeProfile<T>, map: &AnchorMap) -> Vec<T> {
    specialized_prior_masked(profile, map, None)
}

/// Like [`specialized_prior`] with one descriptor removed; the remaining
/// three scores are renormalized by construction.
pub fn specialized_prior_masked<T: Scalar>(
    profile: &RegimeProfile<T>,
    map: &AnchorMap,
    drop: Option<Descriptor>,
) -> Vec<T> {
    let g = active_scores(profile, drop);
    let mut q = vec![T::zero(); map.n_specialized()];
    for d in Descriptor::ALL {
        let experts = map.experts_for(d);
        let per = g[d.index()] / T::from_usize_lossy(experts.len());
        for &e in experts {
            q[e] += per;
        }
    }
    let total: T = q.iter().copied().sum();
    if total < T::c(ZERO_PROFILE_EPS) {
        log::debug!("all-zero profile, using uniform specialized prior");
        let u = T::one() / T::from_usize_lossy(map.n_specialized());
        return vec![u; map.n_specialized()];
    }
    q.iter().map(|&v| v / total).collect()
}

/// Binary entropy in bits, zero at both endpoints.
pub fn binary_entropy_bits<T: Scalar>(p: T) -> T {
    let term = |x: T| {
        if x > T::zero() {
            -x * x.log2()
        } else {
            T::zero()
        }
    };
    term(p) + term(T::one() - p)
}

fn gate_terms<T: Scalar>(g: &[T]) -> (T, T) {
    let n = T::from_usize_lossy(g.len());
    let h = g.iter().map(|&v| binary_entropy_bits(v)).sum::<T>() / n;
    let s = g.iter().copied().fold(T::zero(), T::max);
    (h, s)
}

fn kept_scores<T: Scalar>(profile: &RegimeProfile<T>, drop: Option<Descriptor>) -> Vec<T> {
    Descriptor::ALL
        .iter()
        .filter(|&&d| Some(d) != drop)
        .map(|&d| profile.get(d))
        .collect()
}

/// `π_sh = (1 − max_d g_d) σ(α H − b)` with `H` the mean binary entropy.
pub fn shared_gate<T: Scalar>(profile: &RegimeProfile<T>, params: &GateParams<T>) -> T {
    shared_gate_masked(profile, params, None)
}

pub fn shared_gate_masked<T: Scalar>(
    profile: &RegimeProfile<T>,
    params: &GateParams<T>,
    drop: Option<Descriptor>,
) -> T {
    let (h, s) = gate_terms(&kept_scores(profile, drop));
    gate_value(s, h, params)
}

/// Gate as a function of peak score `s` and mean entropy `h`.
pub fn gate_value<T: Scalar>(s: T, h: T, params: &GateParams<T>) -> T {
    (T::one() - s) * sigmoid(params.alpha * h - params.b)
}

/// `(∂π_sh/∂α, ∂π_sh/∂b)`.
pub fn shared_gate_grad<T: Scalar>(
    profile: &RegimeProfile<T>,
    params: &GateParams<T>,
    drop: Option<Descriptor>,
) -> (T, T) {
    let (h, s) = gate_terms(&kept_scores(profile, drop));
    let sg = sigmoid(params.alpha * h - params.b);
    let k = (T::one() - s) * sg * (T::one() - sg);
    (k * h, -k)
}

pub fn expert_prior<T: Scalar>(
    profile: &RegimeProfile<T>,
    map: &AnchorMap,
    params: &GateParams<T>,
) -> ExpertPrior<T> {
    expert_prior_masked(profile, map, params, None)
}

pub fn expert_prior_masked<T: Scalar>(
    profile: &RegimeProfile<T>,
    map: &AnchorMap,
    params: &GateParams<T>,
    drop: Option<Descriptor>,
) -> ExpertPrior<T> {
    let q_sp = specialized_prior_masked(profile, map, drop);
    let pi = if map.n_shared() == 0 {
        T::zero()
    } else {
        shared_gate_masked(profile, params, drop)
    };
    let mut probs: Vec<T> = q_sp.iter().map(|&q| (T::one() - pi) * q).collect();
    if map.n_shared() > 0 {
        let each = pi / T::from_usize_lossy(map.n_shared());
        probs.extend(std::iter::repeat_n(each, map.n_shared()));
    }
    ExpertPrior {
        probs,
        pi_shared: pi,
    }
}
