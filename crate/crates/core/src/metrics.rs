//! Point-forecast metrics normalized by a seasonal-naive baseline, routing
//! consistency, cluster separation and expert usage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::RoutingRecord;
use crate::error::{AmeError, Result};
use crate::scalar::Scalar;

/// `ŷ_{T+h} = x_{T+h-m⌈h/m⌉}` for `h = 1..=horizon`.
pub fn seasonal_naive_forecast<T: Scalar>(context: &[T], m: usize, horizon: usize) -> Result<Vec<T>> {
    if m == 0 {
        return Err(AmeError::invalid("seasonal period must be positive"));
    }
    let n = context.len();
    if n < m {
        return Err(AmeError::SeriesTooShort { needed: m, got: n });
    }
    Ok((1..=horizon).map(|h| context[n + h - m * h.div_ceil(m) - 1]).collect())
}

fn check_pair<T>(pred: &[T], target: &[T]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(AmeError::Shape(format!(
            "prediction of {} values vs target of {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

pub fn mae<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_pair(pred, target)?;
    let s: T = pred.iter().zip(target).map(|(&p, &y)| (p - y).abs()).sum();
    Ok(s / T::from_usize_lossy(pred.len()))
}

pub fn rmse<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_pair(pred, target)?;
    let s: T = pred.iter().zip(target).map(|(&p, &y)| (p - y) * (p - y)).sum();
    Ok((s / T::from_usize_lossy(pred.len())).sqrt())
}

/// Mean of `2|p - y| / (|p| + |y|)`, where `0/0` counts as zero.
pub fn smape<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_pair(pred, target)?;
    let two = T::c(2.0);
    let s: T = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let d = p.abs() + y.abs();
            if d == T::zero() {
                T::zero()
            } else {
                two * (p - y).abs() / d
            }
        })
        .sum();
    Ok(s / T::from_usize_lossy(pred.len()))
}

/// MAE scaled by the in-sample mean absolute seasonal difference.
pub fn mase<T: Scalar>(pred: &[T], target: &[T], insample: &[T], m: usize) -> Result<T> {
    if m == 0 || insample.len() <= m {
        return Err(AmeError::SeriesTooShort {
            needed: m + 1,
            got: insample.len(),
        });
    }
    let diffs = insample.len() - m;
    let scale = (m..insample.len())
        .map(|t| (insample[t] - insample[t - m]).abs())
        .sum::<T>()
        / T::from_usize_lossy(diffs);
    if scale == T::zero() {
        return Err(AmeError::ZeroScale);
    }
    Ok(mae(pred, target)? / scale)
}

/// The four point metrics of one forecast or the mean over several.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub mase: f64,
    pub smape: f64,
    pub mae: f64,
    pub rmse: f64,
}

impl Metrics {
    pub fn compute(pred: &[f64], target: &[f64], insample: &[f64], m: usize) -> Result<Self> {
        Ok(Metrics {
            mase: mase(pred, target, insample, m)?,
            smape: smape(pred, target)?,
            mae: mae(pred, target)?,
            rmse: rmse(pred, target)?,
        })
    }

    fn as_array(&self) -> [f64; 4] {
        [self.mase, self.smape, self.mae, self.rmse]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Metrics {
            mase: a[0],
            smape: a[1],
            mae: a[2],
            rmse: a[3],
        }
    }

    /// Element-wise mean.
    pub fn mean(items: &[Metrics]) -> Result<Self> {
        if items.is_empty() {
            return Err(AmeError::NoValidPositions);
        }
        let mut acc = [0.0; 4];
        for m in items {
            acc.iter_mut().zip(m.as_array()).for_each(|(a, v)| *a += v);
        }
        Ok(Self::from_array(acc.map(|v| v / items.len() as f64)))
    }

    /// `self / baseline` per metric; identical values give exactly 1.
    pub fn ratio_to(&self, baseline: &Metrics) -> Self {
        let a = self.as_array();
        let b = baseline.as_array();
        Self::from_array(std::array::from_fn(|i| if a[i] == b[i] { 1.0 } else { a[i] / b[i] }))
    }
}

/// One evaluation task scored for the model and for seasonal naive on the
/// same windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub period: usize,
    pub n_windows: usize,
    pub model: Metrics,
    pub naive: Metrics,
    pub ratios: Metrics,
}

impl TaskReport {
    pub fn new(task: impl Into<String>, period: usize, n_windows: usize, model: Metrics, naive: Metrics) -> Self {
        TaskReport {
            task: task.into(),
            period,
            n_windows,
            ratios: model.ratio_to(&naive),
            model,
            naive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tasks: Vec<TaskReport>,
    /// Geometric mean of every task's ratio.
    pub aggregate: Metrics,
}

impl MetricReport {
    pub fn new(tasks: Vec<TaskReport>) -> Result<Self> {
        let aggregate = aggregate_normalized(&tasks)?;
        Ok(MetricReport { tasks, aggregate })
    }
}

/// `exp(mean(log ratio))` per metric over tasks.
pub fn aggregate_normalized(tasks: &[TaskReport]) -> Result<Metrics> {
    let ratios: Vec<Metrics> = tasks.iter().map(|t| t.ratios).collect();
    geometric_mean(&ratios)
}

pub fn geometric_mean(ratios: &[Metrics]) -> Result<Metrics> {
    if ratios.is_empty() {
        return Err(AmeError::EmptyDataset);
    }
    const NAMES: [&str; 4] = ["mase", "smape", "mae", "rmse"];
    let mut acc = [0.0; 4];
    for r in ratios {
        for (i, v) in r.as_array().into_iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(AmeError::NonPositiveRatio(NAMES[i].into()));
            }
            acc[i] += v.ln();
        }
    }
    Ok(Metrics::from_array(acc.map(|s| (s / ratios.len() as f64).exp())))
}

/// Top-1 expert of every tracked token: `[probe][layer][token]`.
pub type Assignments = Vec<Vec<Vec<usize>>>;

/// Fixed probe windows and the routing they received when captured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    probes: Vec<(String, usize)>,
    reference: Assignments,
}

impl ProbeSet {
    pub fn new(probes: Vec<(String, usize)>, reference: Assignments) -> Result<Self> {
        if probes.len() != reference.len() {
            return Err(AmeError::TopologyMismatch(format!(
                "{} probes but {} reference captures",
                probes.len(),
                reference.len()
            )));
        }
        Ok(ProbeSet { probes, reference })
    }

    /// `(series id, window offset)` of every probe.
    pub fn probes(&self) -> &[(String, usize)] {
        &self.probes
    }

    pub fn reference(&self) -> &Assignments {
        &self.reference
    }

    pub fn n_tracked(&self) -> usize {
        self.reference.iter().flatten().map(Vec::len).sum()
    }

    /// Share of tracked `(probe, layer, token)` tuples whose top-1 expert
    /// still matches the reference.
    pub fn routing_consistency(&self, current: &Assignments) -> Result<f64> {
        routing_consistency(&self.reference, current)
    }
}

pub fn routing_consistency(reference: &Assignments, current: &Assignments) -> Result<f64> {
    let mismatch = || AmeError::TopologyMismatch("current routing does not match the probe layout".into());
    if reference.len() != current.len() {
        return Err(mismatch());
    }
    let mut same = 0usize;
    let mut total = 0usize;
    for (a, b) in reference.iter().zip(current) {
        if a.len() != b.len() {
            return Err(mismatch());
        }
        for (x, y) in a.iter().zip(b) {
            if x.len() != y.len() {
                return Err(mismatch());
            }
            same += x.iter().zip(y).filter(|(p, q)| p == q).count();
            total += x.len();
        }
    }
    if total == 0 {
        return Err(AmeError::NoValidPositions);
    }
    Ok(same as f64 / total as f64)
}

/// Between-over-within dispersion ratio, each scaled by its degrees of
/// freedom. Clusters are the distinct labels. A within-cluster dispersion
/// below `1e-12` yields `+∞`.
pub fn calinski_harabasz(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(AmeError::Cluster(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let dim = points.first().map_or(0, Vec::len);
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(AmeError::Cluster("points must share a positive dimension".into()));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let n = points.len();
    let c = members.len();
    if c < 2 {
        return Err(AmeError::Cluster("need at least two clusters".into()));
    }
    if n <= c {
        return Err(AmeError::Cluster(format!("{n} points cannot separate {c} clusters")));
    }
    let centroid = |idx: &[usize]| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for &i in idx {
            m.iter_mut().zip(&points[i]).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= idx.len() as f64);
        m
    };
    let all: Vec<usize> = (0..n).collect();
    let mu = centroid(&all);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut between = 0.0;
    let mut within = 0.0;
    for idx in members.values() {
        let mj = centroid(idx);
        between += idx.len() as f64 * sq(&mj, &mu);
        within += idx.iter().map(|&i| sq(&points[i], &mj)).sum::<f64>();
    }
    if within < 1e-12 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (c - 1) as f64) / (within / (n - c) as f64))
}

/// Entropy of the usage histogram divided by `ln E`: 1 for uniform usage,
/// 0 for a single expert. A pool of one expert counts as uniform.
pub fn usage_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    if counts.len() < 2 {
        return 1.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h / (counts.len() as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertUsage {
    /// `[layer][expert]` top-1 counts.
    pub counts: Vec<Vec<usize>>,
    /// Normalized entropy per layer.
    pub entropy: Vec<f64>,
}

/// Usage per layer, where `records[s][l]` is layer `l` of sequence `s`.
pub fn expert_usage<T: Scalar>(records: &[Vec<RoutingRecord<T>>]) -> ExpertUsage {
    let n_layers = records.first().map_or(0, Vec::len);
    let mut counts: Vec<Vec<usize>> = (0..n_layers)
        .map(|l| vec![0; records[0][l].n_experts()])
        .collect();
    for seq in records {
        for (l, rec) in seq.iter().enumerate().take(n_layers) {
            for t in 0..rec.n_tokens() {
                counts[l][rec.top1(t)] += 1;
            }
        }
    }
    let entropy = counts.iter().map(|c| usage_entropy(c)).collect();
    ExpertUsage { counts, entropy }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seasonal_naive_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(seasonal_naive_forecast(&x, 1, 3).unwrap(), vec![4.0; 3]);
        assert_eq!(seasonal_naive_forecast(&x, 4, 4).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            seasonal_naive_forecast(&x, 4, 6).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0]
        );
        assert!(seasonal_naive_forecast(&x, 5, 2).is_err());
        assert!(seasonal_naive_forecast(&x, 0, 2).is_err());
    }

    #[test]
    fn perfect_and_shifted_forecasts() {
        let y = [1.0, -2.0, 3.5, 0.0];
        let ins = [0.0, 1.0, 0.0, 2.0, 1.0];
        let m = Metrics::compute(&y, &y, &ins, 1).unwrap();
        assert_eq!(m, Metrics::default());
        let shifted: Vec<f64> = y.iter().map(|v| v + 0.75).collect();
        assert!((mae(&shifted, &y).unwrap() - 0.75).abs() < 1e-15);
        assert!((rmse(&shifted, &y).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(mase(&y, &y, &[2.0; 6], 2), Err(AmeError::ZeroScale)));
        assert!(mae(&y, &y[..3]).is_err());
    }

    #[test]
    fn metrics_match_direct_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(1..30);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let ins: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
            let m = rng.random_range(1..8);
            let mut abs = 0.0;
            let mut sq = 0.0;
            let mut sm = 0.0;
            for i in 0..n {
                abs += (p[i] - y[i]).abs();
                sq += (p[i] - y[i]).powi(2);
                sm += 2.0 * (p[i] - y[i]).abs() / (p[i].abs() + y[i].abs());
            }
            let mut scale = 0.0;
            for t in m..ins.len() {
                scale += (ins[t] - ins[t - m]).abs();
            }
            scale /= (ins.len() - m) as f64;
            let n = n as f64;
            let got = Metrics::compute(&p, &y, &ins, m).unwrap();
            assert!((got.mae - abs / n).abs() < 1e-12);
            assert!((got.rmse - (sq / n).sqrt()).abs() < 1e-12);
            assert!((got.smape - sm / n).abs() < 1e-12);
            assert!((got.mase - abs / n / scale).abs() < 1e-12);
        }
    }

    #[test]
    fn smape_zero_over_zero() {
        assert_eq!(smape::<f64>(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((smape::<f64>(&[0.0, 1.0], &[0.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    fn ratio_task(v: f64) -> TaskReport {
        let base = Metrics {
            mase: 1.0,
            smape: 1.0,
            mae: 1.0,
            rmse: 1.0,
        };
        let model = Metrics::from_array([v; 4]);
        TaskReport::new("t", 1, 1, model, base)
    }

    #[test]
    fn aggregation() {
        let g = aggregate_normalized(&[ratio_task(0.5), ratio_task(2.0)]).unwrap();
        assert!((g.mase - 1.0).abs() < 1e-15);
        let naive = Metrics {
            mase: 0.7,
            smape: 0.0,
            mae: 0.3,
            rmse: 0.4,
        };
        let r = MetricReport::new(vec![TaskReport::new("n", 4, 3, naive, naive)]).unwrap();
        assert_eq!(r.aggregate, Metrics::from_array([1.0; 4]));
        assert!(matches!(
            aggregate_normalized(&[ratio_task(0.0)]),
            Err(AmeError::NonPositiveRatio(_))
        ));
        assert!(aggregate_normalized(&[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..17).map(|_| rng.random_range(0.1..3.0)).collect();
        let tasks: Vec<TaskReport> = vals.iter().map(|&v| ratio_task(v)).collect();
        let oracle = (vals.iter().map(|v| v.ln()).sum::<f64>() / vals.len() as f64).exp();
        assert!((aggregate_normalized(&tasks).unwrap().rmse - oracle).abs() < 1e-12);
    }

    #[test]
    fn routing_consistency_counts() {
        let reference: Assignments = vec![vec![vec![0, 1, 2, 3, 4], vec![1, 1, 1, 1, 1]]];
        assert_eq!(routing_consistency(&reference, &reference).unwrap(), 1.0);
        let changed: Assignments = vec![vec![vec![1, 2, 3, 4, 0], vec![0, 0, 0, 0, 0]]];
        assert_eq!(routing_consistency(&reference, &changed).unwrap(), 0.0);
        // seven of ten tuples agree
        let seven: Assignments = vec![vec![vec![0, 1, 0, 0, 0], vec![1, 1, 1, 1, 1]]];
        assert!((routing_consistency(&reference, &seven).unwrap() - 0.7).abs() < 1e-15);
        let short: Assignments = vec![vec![vec![0, 1, 2, 3]]];
        assert!(matches!(
            routing_consistency(&reference, &short),
            Err(AmeError::TopologyMismatch(_))
        ));
        let set = ProbeSet::new(vec![("a".into(), 0)], reference.clone()).unwrap();
        assert_eq!(set.n_tracked(), 10);
        assert_eq!(set.routing_consistency(&seven).unwrap(), routing_consistency(&reference, &seven).unwrap());
        assert!(ProbeSet::new(vec![], reference).is_err());
    }

    fn ch_oracle(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let n = points.len();
        let d = points[0].len();
        let mut mu = vec![0.0; d];
        for p in points {
            for j in 0..d {
                mu[j] += p[j] / n as f64;
            }
        }
        let mut b = 0.0;
        let mut w = 0.0;
        for c in 0..k {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let mut mc = vec![0.0; d];
            for &i in &idx {
                for j in 0..d {
                    mc[j] += points[i][j] / idx.len() as f64;
                }
            }
            for j in 0..d {
                b += idx.len() as f64 * (mc[j] - mu[j]).powi(2);
            }
            for &i in &idx {
                for j in 0..d {
                    w += (points[i][j] - mc[j]).powi(2);
                }
            }
        }
        (b / (k - 1) as f64) / (w / (n - k) as f64)
    }

    #[test]
    fn calinski_harabasz_oracle_and_sentinel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let got = calinski_harabasz(&pts, &labels).unwrap();
        let want = ch_oracle(&pts, &labels, 3);
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));

        let tight = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![5.0, 5.0], vec![5.0, 5.0]];
        assert_eq!(calinski_harabasz(&tight, &[0, 0, 1, 1]).unwrap(), f64::INFINITY);
        assert!(calinski_harabasz(&tight, &[0, 0, 0, 0]).is_err());
        assert!(calinski_harabasz(&tight[..2], &[0, 1]).is_err());
    }

    #[test]
    fn calinski_harabasz_prefers_true_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..15 {
                let off = c as f64 * 10.0;
                pts.push(vec![off + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
                labels.push(c);
            }
        }
        let shuffled: Vec<usize> = (0..30).map(|i| i % 2).collect();
        assert!(calinski_harabasz(&pts, &labels).unwrap() > calinski_harabasz(&pts, &shuffled).unwrap());
    }

    #[test]
    fn calinski_harabasz_noise_scaling() {
        // contracting the within-cluster noise by s multiplies CH by 1/s^2
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centers = [[0.0, 0.0], [4.0, 1.0], [-2.0, 5.0]];
        let mut noise = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            let raw: Vec<[f64; 2]> = (0..10).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let mean = [raw.iter().map(|r| r[0]).sum::<f64>() / 10.0, raw.iter().map(|r| r[1]).sum::<f64>() / 10.0];
            noise.extend(raw.iter().map(|r| [r[0] - mean[0], r[1] - mean[1]]));
            labels.extend(std::iter::repeat_n(c, 10));
        }
        let build = |s: f64| -> Vec<Vec<f64>> {
            noise
                .iter()
                .zip(&labels)
                .map(|(n, &c)| vec![centers[c][0] + s * n[0], centers[c][1] + s * n[1]])
                .collect()
        };
        let a = calinski_harabasz(&build(1.0), &labels).unwrap();
        let b = calinski_harabasz(&build(0.5), &labels).unwrap();
        assert!((b / a - 4.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn calinski_harabasz_rigid_invariance(theta in 0.0f64..6.28, dx in -5.0f64..5.0, dy in -5.0f64..5.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
            let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
            let (s, c) = theta.sin_cos();
            let moved: Vec<Vec<f64>> = pts.iter().map(|p| vec![c * p[0] - s * p[1] + dx, s * p[0] + c * p[1] + dy]).collect();
            let a = calinski_harabasz(&pts, &labels).unwrap();
            let b = calinski_harabasz(&moved, &labels).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn routing_consistency_bounded_and_order_free(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| -> Assignments {
                (0..4).map(|_| (0..2).map(|_| (0..6).map(|_| rng.random_range(0..5)).collect()).collect()).collect()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let rc = routing_consistency(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&rc));
            let (mut ra, mut rb) = (a.clone(), b.clone());
            ra.reverse();
            rb.reverse();
            prop_assert_eq!(rc, routing_consistency(&ra, &rb).unwrap());
            prop_assert_eq!(routing_consistency(&a, &a).unwrap(), 1.0);
        }
    }

    fn record(top1: &[usize], e: usize) -> RoutingRecord<f64> {
        let n = top1.len();
        let mut logits = Array2::zeros((n, e));
        for (t, &j) in top1.iter().enumerate() {
            logits[[t, j]] = 5.0;
        }
        let mut probs = logits.mapv(f64::exp);
        for mut r in probs.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        RoutingRecord {
            logits,
            probs,
            topk: top1.iter().map(|&j| vec![j]).collect(),
            weights: vec![vec![1.0]; n],
        }
    }

    #[test]
    fn usage_histogram_and_entropy() {
        assert!((usage_entropy(&[3, 3, 3, 3]) - 1.0).abs() < 1e-15);
        assert_eq!(usage_entropy(&[0, 9, 0]), 0.0);
        let recs = vec![
            vec![record(&[0, 1, 1], 3), record(&[2, 2, 2], 3)],
            vec![record(&[1, 0], 3), record(&[2, 0], 3)],
        ];
        let u = expert_usage(&recs);
        assert_eq!(u.counts, vec![vec![2, 3, 0], vec![1, 0, 4]]);
        assert!(u.entropy[0] > u.entropy[1]);
    }
}
