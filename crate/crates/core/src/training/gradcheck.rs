use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::objective::{batch_objective, ObjectiveContext, PreparedWindow};
use crate::backbone::{ModelState, GATE_TENSOR};
use crate::error::{AmeError, Result};

/// Floor of the relative-error denominator, so that coordinates with a
/// structurally zero gradient do not blow up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `|fd - a| / max(|fd| + |a|, floor)`.
pub fn rel_error(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / (fd.abs() + analytic.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct GroupError {
    pub max_rel: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct GradCheckReport {
    /// Keyed by tensor name with layer and expert indices removed.
    pub groups: BTreeMap<String, GroupError>,
    pub max_rel: f64,
    pub n_checked: usize,
}

/// `layer3.expert12.w1` becomes `layer.expert.w1`.
pub fn tensor_group(name: &str) -> String {
    name.chars().filter(|c| !c.is_ascii_digit()).collect()
}

/// Compare analytic gradients with extrapolated central differences on at least
/// `n_samples` coordinates spread over every tensor. Routing is frozen to
/// the selection of the unperturbed model so the objective is smooth in
/// every coordinate.
pub fn grad_check(
    model: &ModelState<f64>,
    batch: &[PreparedWindow<f64>],
    ctx: &ObjectiveContext<'_>,
    n_samples: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) || n_samples == 0 {
        return Err(AmeError::invalid("grad check needs a positive step and sample count"));
    }
    let base = batch_objective(model, batch, ctx, None, false)?;
    let forced = base.routes;
    let analytic = batch_objective(model, batch, ctx, Some(&forced), true)?
        .grads
        .expect("gradients requested");

    let tensors = model.tensors();
    let eligible: Vec<usize> = (0..tensors.len())
        .filter(|&i| ctx.gate_learnable || tensors[i].name != GATE_TENSOR)
        .collect();
    let total: usize = eligible.iter().map(|&i| tensors[i].data.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for &ti in &eligible {
        let len = tensors[ti].data.len();
        let share = (n_samples * len).div_ceil(total.max(1));
        let k = share.max(2).min(len);
        coords.extend(sample(&mut rng, len, k).into_iter().map(|i| (ti, i)));
    }
    drop(tensors);

    let eval = |ti: usize, i: usize, delta: f64| -> Result<f64> {
        let mut m = model.clone();
        m.tensors_mut()[ti].data[i] += delta;
        Ok(batch_objective(&m, batch, ctx, Some(&forced), false)?.parts.total)
    };
    let grads = analytic.tensors();
    let names: Vec<String> = model.tensors().into_iter().map(|t| t.name).collect();
    let mut report = GradCheckReport::default();
    for (ti, i) in coords {
        let central = |step: f64| -> Result<f64> { Ok((eval(ti, i, step)? - eval(ti, i, -step)?) / (2.0 * step)) };
        // Richardson step: cancels the h² term, which matters where layer
        // norms see small, strongly curved inputs
        let fd = (4.0 * central(h / 2.0)? - central(h)?) / 3.0;
        let err = rel_error(fd, grads[ti].data[i]);
        let g = report.groups.entry(tensor_group(&names[ti])).or_default();
        g.max_rel = g.max_rel.max(err);
        g.count += 1;
        report.max_rel = report.max_rel.max(err);
        report.n_checked += 1;
    }
    Ok(report)
}
