use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, GroupBy};
use super::inference::Inference;
use crate::error::{AmeError, Result};
use crate::metrics::{seasonal_naive_forecast, MetricReport, Metrics, TaskReport};
use crate::parallel::par_map;
use crate::series::{Series, Window};

/// Anything that maps a context window to a horizon forecast.
pub trait Forecaster: Sync {
    fn name(&self) -> String;

    /// One forecast per variate, `window.horizon_len()` values each.
    fn forecast(&self, window: &Window<f64>, period: usize) -> Result<Vec<Vec<f64>>>;

    /// Whether windows of this shape can be scored at all.
    fn supports(&self, _n_variates: usize, _context_len: usize, _horizon_len: usize) -> bool {
        true
    }
}

/// The baseline every ratio is taken against.
#[derive(Debug, Clone, Copy, Default)]
pub struct SeasonalNaive;

/// Seasonal period usable on `available` past values; falls back to 1.
pub fn usable_period(period: usize, available: usize) -> usize {
    if period >= 1 && period < available {
        period
    } else {
        1
    }
}

impl Forecaster for SeasonalNaive {
    fn name(&self) -> String {
        "seasonal-naive".into()
    }

    fn forecast(&self, window: &Window<f64>, period: usize) -> Result<Vec<Vec<f64>>> {
        let h = window.horizon_len();
        window
            .context
            .iter()
            .map(|c| seasonal_naive_forecast(c, usable_period(period, c.len() + 1), h))
            .collect()
    }
}

pub struct ModelForecaster<'a> {
    pub name: String,
    pub inference: Inference<'a>,
}

impl Forecaster for ModelForecaster<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forecast(&self, window: &Window<f64>, _period: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self.inference.run(window)?.forecast())
    }

    fn supports(&self, n_variates: usize, context_len: usize, horizon_len: usize) -> bool {
        self.inference.fits(n_variates, context_len, horizon_len)
    }
}

/// Series scored together; one ratio per task enters the aggregate.
#[derive(Debug, Clone)]
pub struct Task<'a> {
    pub name: String,
    pub period: usize,
    pub series: Vec<&'a Series<f64>>,
}

/// Group series into tasks, in name order.
pub fn group_tasks<'a>(data: &'a [Series<f64>], by: GroupBy) -> Vec<Task<'a>> {
    let mut groups: BTreeMap<String, Vec<&Series<f64>>> = BTreeMap::new();
    for s in data {
        let key = match (by, &s.label) {
            (GroupBy::Label, Some(l)) => l.clone(),
            _ => s.freq.clone(),
        };
        groups.entry(key).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(name, series)| {
            // the most common period among members
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for s in &series {
                *counts.entry(s.period.unwrap_or(1)).or_default() += 1;
            }
            let period = counts.into_iter().max_by_key(|&(p, n)| (n, std::cmp::Reverse(p))).map_or(1, |(p, _)| p);
            Task { name, period, series }
        })
        .collect()
}

#[derive(Debug, Default)]
struct Scored {
    model: Vec<Metrics>,
    naive: Vec<Metrics>,
}

/// Score the window whose horizon ends `back` steps before each series'
/// end. Variates with a constant seasonal in-sample history (no MASE scale)
/// are skipped for both forecasters alike.
fn score(f: &dyn Forecaster, task: &Task<'_>, context_len: usize, horizon_len: usize, back: usize) -> Result<Scored> {
    let per_series = par_map(&task.series, |s| -> Result<Vec<(Metrics, Metrics)>> {
        let need = context_len + horizon_len + back;
        if s.len() < need || !f.supports(s.n_variates(), context_len, horizon_len) {
            return Ok(Vec::new());
        }
        let origin = s.len() - back - horizon_len;
        let w = Window::at(s, origin - context_len, context_len, horizon_len)?;
        let period = s.period.unwrap_or(task.period);
        let model = f.forecast(&w, period)?;
        let naive = SeasonalNaive.forecast(&w, period)?;
        let mut out = Vec::new();
        for v in 0..s.n_variates() {
            let insample = &s.variates[v][..origin];
            let m = usable_period(period, insample.len());
            let target = &w.horizon[v];
            match (
                Metrics::compute(&model[v], target, insample, m),
                Metrics::compute(&naive[v], target, insample, m),
            ) {
                (Ok(a), Ok(b)) => out.push((a, b)),
                (Err(AmeError::ZeroScale), _) | (_, Err(AmeError::ZeroScale)) => {
                    log::debug!("{}: variate {v} has no MASE scale, skipped", s.id);
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        Ok(out)
    });
    let mut scored = Scored::default();
    for r in per_series {
        for (a, b) in r? {
            scored.model.push(a);
            scored.naive.push(b);
        }
    }
    Ok(scored)
}

/// Context length with the lowest validation MASE ratio; ties go to the
/// shorter context.
fn pick_context(f: &dyn Forecaster, task: &Task<'_>, cfg: &EvalConfig, fallback: usize) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    let mut grid = cfg.context_lengths.clone();
    grid.sort_unstable();
    grid.dedup();
    for c in grid {
        let s = score(f, task, c, cfg.horizon_len, cfg.horizon_len)?;
        if s.model.is_empty() {
            continue;
        }
        let ratio = Metrics::mean(&s.model)?.ratio_to(&Metrics::mean(&s.naive)?).mase;
        if best.is_none_or(|(r, _)| ratio < r) {
            best = Some((ratio, c));
        }
    }
    Ok(best.map_or(fallback, |(_, c)| c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub model: String,
    /// Context length used per task.
    pub context_len: BTreeMap<String, usize>,
    pub metrics: MetricReport,
}

/// Score the last window of every series against seasonal naive on the
/// same windows, then aggregate the per-task ratios geometrically.
pub fn evaluate(f: &dyn Forecaster, data: &[Series<f64>], cfg: &EvalConfig, default_context: usize) -> Result<EvalOutcome> {
    if data.is_empty() {
        return Err(AmeError::EmptyDataset);
    }
    let fixed = cfg.context_len.unwrap_or(default_context);
    let mut tasks = Vec::new();
    let mut chosen = BTreeMap::new();
    for task in group_tasks(data, cfg.group_by) {
        let c = if cfg.sweep {
            pick_context(f, &task, cfg, fixed)?
        } else {
            fixed
        };
        let s = score(f, &task, c, cfg.horizon_len, 0)?;
        if s.model.is_empty() {
            log::warn!("task `{}` has no scorable window at context {c}", task.name);
            continue;
        }
        chosen.insert(task.name.clone(), c);
        tasks.push(TaskReport::new(
            task.name,
            task.period,
            s.model.len(),
            Metrics::mean(&s.model)?,
            Metrics::mean(&s.naive)?,
        ));
    }
    if tasks.is_empty() {
        return Err(AmeError::InsufficientData("no task has a scorable window".into()));
    }
    Ok(EvalOutcome {
        model: f.name(),
        context_len: chosen,
        metrics: MetricReport::new(tasks)?,
    })
}
