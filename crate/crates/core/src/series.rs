//! Time series containers, JSONL ingestion, windowing, per-window
//! standardization and patching.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AmeError, Result};
use crate::scalar::{cast_slice, Scalar};

/// Floor applied to the per-variate standard deviation of a context.
pub const SCALE_FLOOR: f64 = 1e-5;

/// A univariate or multivariate series. All variates share one time index.
#[derive(Debug, Clone, PartialEq)]
pub struct Series<T = f64> {
    pub id: String,
    pub freq: String,
    pub variates: Vec<Vec<T>>,
    /// Ground-truth regime label, when known (synthetic data).
    pub label: Option<String>,
    /// Seasonal period used by seasonal-naive evaluation, when known.
    pub period: Option<usize>,
}

pub type Dataset<T = f64> = Vec<Series<T>>;

impl<T: Scalar> Series<T> {
    pub fn new(
        id: impl Into<String>,
        freq: impl Into<String>,
        variates: Vec<Vec<T>>,
    ) -> Result<Self> {
        let s = Series {
            id: id.into(),
            freq: freq.into(),
            variates,
            label: None,
            period: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn univariate(id: impl Into<String>, values: Vec<T>) -> Result<Self> {
        Self::new(id, "", vec![values])
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_period(mut self, period: usize) -> Self {
        self.period = Some(period);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .variates
            .first()
            .ok_or_else(|| AmeError::invalid(format!("series `{}` has no variates", self.id)))?;
        if first.is_empty() {
            return Err(AmeError::invalid(format!("series `{}` is empty", self.id)));
        }
        if self.variates.iter().any(|v| v.len() != first.len()) {
            return Err(AmeError::invalid(format!(
                "series `{}` has variates of unequal length",
                self.id
            )));
        }
        if self.variates.iter().flatten().any(|x| !x.is_finite()) {
            return Err(AmeError::NonFinite {
                id: self.id.clone(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.variates.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_variates(&self) -> usize {
        self.variates.len()
    }

    pub fn cast<U: Scalar>(&self) -> Series<U> {
        Series {
            id: self.id.clone(),
            freq: self.freq.clone(),
            variates: self.variates.iter().map(|v| cast_slice(v)).collect(),
            label: self.label.clone(),
            period: self.period,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default)]
    freq: String,
    #[serde(default)]
    values: Option<Vec<Option<f64>>>,
    #[serde(default)]
    variates: Option<Vec<Vec<Option<f64>>>>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    period: Option<usize>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    freq: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    variates: Option<&'a [Vec<f64>]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    period: Option<usize>,
}

/// Replace bare `NaN` / `Infinity` tokens outside string literals with `null`
/// so they surface as non-finite values rather than JSON syntax errors.
fn sanitize_non_finite(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut in_str = false;
    let mut escaped = false;
    let mut i = 0;
    while let Some(c) = line[i..].chars().next() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
        } else if c == '"' {
            in_str = true;
        } else if let Some(t) = [
            "-Infinity",
            "+Infinity",
            "Infinity",
            "-inf",
            "inf",
            "NaN",
            "nan",
        ]
        .into_iter()
        .find(|t| line[i..].starts_with(t))
        {
            out.push_str("null");
            i += t.len();
            continue;
        }
        out.push(c);
        i += c.len_utf8();
    }
    out
}

fn finite_values(id: &str, raw: Vec<Option<f64>>) -> Result<Vec<f64>> {
    raw.into_iter()
        .map(|v| match v {
            Some(x) if x.is_finite() => Ok(x),
            _ => Err(AmeError::NonFinite { id: id.to_string() }),
        })
        .collect()
}

/// Parse a dataset from JSONL text.
pub fn parse_dataset(text: &str) -> Result<Dataset<f64>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cleaned = sanitize_non_finite(line);
        let rec: RawRecord = serde_json::from_str(&cleaned).map_err(|e| AmeError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let variates = match (rec.values, rec.variates) {
            (Some(v), None) => vec![finite_values(&rec.id, v)?],
            (None, Some(vs)) => vs
                .into_iter()
                .map(|v| finite_values(&rec.id, v))
                .collect::<Result<Vec<_>>>()?,
            _ => {
                return Err(AmeError::Parse {
                    line: lineno,
                    message: "exactly one of `values` or `variates` is required".into(),
                })
            }
        };
        let mut series = Series::new(rec.id, rec.freq, variates).map_err(|e| match e {
            AmeError::NonFinite { .. } => e,
            other => AmeError::Parse {
                line: lineno,
                message: other.to_string(),
            },
        })?;
        series.label = rec.label;
        series.period = rec.period;
        out.push(series);
    }
    if out.is_empty() {
        return Err(AmeError::EmptyDataset);
    }
    Ok(out)
}

/// Load a JSONL dataset, one series per line.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| AmeError::io(path, e))?;
    parse_dataset(&text)
}

pub fn dataset_to_jsonl<T: Scalar>(data: &[Series<T>]) -> String {
    let mut out = String::new();
    for s in data {
        let vars: Vec<Vec<f64>> = s.variates.iter().map(|v| cast_slice(v)).collect();
        let rec = OutRecord {
            id: &s.id,
            freq: &s.freq,
            values: (vars.len() == 1).then(|| vars[0].as_slice()),
            variates: (vars.len() != 1).then_some(vars.as_slice()),
            label: s.label.as_deref(),
            period: s.period,
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable record"));
        out.push('\n');
    }
    out
}

pub fn save_dataset<T: Scalar>(path: impl AsRef<Path>, data: &[Series<T>]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| AmeError::io(path, e))?;
    f.write_all(dataset_to_jsonl(data).as_bytes())
        .map_err(|e| AmeError::io(path, e))
}

/// A context/horizon slice of a series.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<T = f64> {
    pub context: Vec<Vec<T>>,
    pub horizon: Vec<Vec<T>>,
    pub source_id: String,
    pub offset: usize,
}

impl<T: Scalar> Window<T> {
    pub fn context_len(&self) -> usize {
        self.context.first().map_or(0, Vec::len)
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon.first().map_or(0, Vec::len)
    }

    pub fn n_variates(&self) -> usize {
        self.context.len()
    }

    /// Cut the window starting at `offset` out of `series`.
    pub fn at(series: &Series<T>, offset: usize, t_ctx: usize, t_hor: usize) -> Result<Self> {
        if t_ctx < 2 || t_hor < 1 {
            return Err(AmeError::invalid("window needs t_ctx >= 2 and t_hor >= 1"));
        }
        if offset + t_ctx + t_hor > series.len() {
            return Err(AmeError::SeriesTooShort {
                needed: offset + t_ctx + t_hor,
                got: series.len(),
            });
        }
        let split = offset + t_ctx;
        Ok(Window {
            context: series
                .variates
                .iter()
                .map(|v| v[offset..split].to_vec())
                .collect(),
            horizon: series
                .variates
                .iter()
                .map(|v| v[split..split + t_hor].to_vec())
                .collect(),
            source_id: series.id.clone(),
            offset,
        })
    }

    /// The final `t_ctx + t_hor` values of the series.
    pub fn last(series: &Series<T>, t_ctx: usize, t_hor: usize) -> Result<Self> {
        let need = t_ctx + t_hor;
        if series.len() < need {
            return Err(AmeError::SeriesTooShort {
                needed: need,
                got: series.len(),
            });
        }
        Self::at(series, series.len() - need, t_ctx, t_hor)
    }
}

pub fn make_windows<T: Scalar>(
    series: &Series<T>,
    t_ctx: usize,
    t_hor: usize,
    stride: usize,
) -> Result<Vec<Window<T>>> {
    if t_ctx < 2 {
        return Err(AmeError::invalid("t_ctx must be at least 2"));
    }
    if t_hor < 1 {
        return Err(AmeError::invalid("t_hor must be at least 1"));
    }
    if stride < 1 {
        return Err(AmeError::invalid("stride must be at least 1"));
    }
    let mut out = Vec::new();
    let mut offset = 0;
    while offset + t_ctx + t_hor <= series.len() {
        out.push(Window::at(series, offset, t_ctx, t_hor)?);
        offset += stride;
    }
    Ok(out)
}

/// Per-variate location and scale of a context.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<T = f64> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> NormStats<T> {
    /// Context-only statistics: mean and population standard deviation,
    /// floored at [`SCALE_FLOOR`].
    pub fn from_context(context: &[Vec<T>]) -> Self {
        let floor = T::c(SCALE_FLOOR);
        let (mean, scale) = context
            .iter()
            .map(|v| {
                let n = T::from_usize_lossy(v.len());
                let m = v.iter().copied().sum::<T>() / n;
                let var = v.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / n;
                (m, var.sqrt().max(floor))
            })
            .unzip();
        NormStats { mean, scale }
    }

    pub fn normalize(&self, variate: usize, xs: &[T]) -> Vec<T> {
        let (m, s) = (self.mean[variate], self.scale[variate]);
        xs.iter().map(|&x| (x - m) / s).collect()
    }

    pub fn denormalize(&self, variate: usize, xs: &[T]) -> Vec<T> {
        let (m, s) = (self.mean[variate], self.scale[variate]);
        xs.iter().map(|&x| x * s + m).collect()
    }
}

/// Standardize a window with its own context statistics; the horizon is
/// mapped with the same statistics.
pub fn standardize_window<T: Scalar>(w: &Window<T>) -> (Window<T>, NormStats<T>) {
    let stats = NormStats::from_context(&w.context);
    let context = w
        .context
        .iter()
        .enumerate()
        .map(|(i, v)| stats.normalize(i, v))
        .collect();
    let horizon = w
        .horizon
        .iter()
        .enumerate()
        .map(|(i, v)| stats.normalize(i, v))
        .collect();
    (
        Window {
            context,
            horizon,
            source_id: w.source_id.clone(),
            offset: w.offset,
        },
        stats,
    )
}

pub fn destandardize_window<T: Scalar>(w: &Window<T>, stats: &NormStats<T>) -> Window<T> {
    Window {
        context: w
            .context
            .iter()
            .enumerate()
            .map(|(i, v)| stats.denormalize(i, v))
            .collect(),
        horizon: w
            .horizon
            .iter()
            .enumerate()
            .map(|(i, v)| stats.denormalize(i, v))
            .collect(),
        source_id: w.source_id.clone(),
        offset: w.offset,
    }
}

/// A fixed-length segment with a validity mask for zero-padded slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T = f64> {
    pub values: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> Patch<T> {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Split into `ceil(T / P)` non-overlapping patches; the last one is
/// zero-padded and its padded slots are marked invalid.
pub fn patchify<T: Scalar>(values: &[T], patch_len: usize) -> Result<Vec<Patch<T>>> {
    if patch_len == 0 {
        return Err(AmeError::invalid("patch length must be positive"));
    }
    Ok(values
        .chunks(patch_len)
        .map(|chunk| {
            let mut vals = chunk.to_vec();
            let mut valid = vec![true; chunk.len()];
            vals.resize(patch_len, T::zero());
            valid.resize(patch_len, false);
            Patch {
                values: vals,
                valid,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Series<f64> {
        Series::univariate("r", (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn parses_valid_jsonl() {
        let text = "{\"id\":\"a\",\"freq\":\"H\",\"values\":[1,2,3]}\n{\"id\":\"b\",\"freq\":\"D\",\"variates\":[[1,2],[3,4]],\"label\":\"trend\"}\n";
        let ds = parse_dataset(text).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[1].n_variates(), 2);
        assert_eq!(ds[1].label.as_deref(), Some("trend"));
    }

    #[test]
    fn nan_is_reported_with_series_id() {
        let text = "{\"id\":\"ok\",\"freq\":\"H\",\"values\":[1,2]}\n{\"id\":\"bad\",\"freq\":\"H\",\"values\":[1,NaN,3]}\n";
        match parse_dataset(text) {
            Err(AmeError::NonFinite { id }) => assert_eq!(id, "bad"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_names_line() {
        let text = "{\"id\":\"a\",\"freq\":\"H\",\"values\":[1]}\n{broken\n";
        match parse_dataset(text) {
            Err(AmeError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse_dataset("\n\n"), Err(AmeError::EmptyDataset)));
    }

    #[test]
    fn nan_inside_string_is_left_alone() {
        let ds = parse_dataset("{\"id\":\"NaN inf\",\"values\":[1.5]}").unwrap();
        assert_eq!(ds[0].id, "NaN inf");
    }

    #[test]
    fn three_variate_round_trip() {
        let vars: Vec<Vec<f64>> = (0..3)
            .map(|k| (0..100).map(|i| (i * (k + 1)) as f64 * 0.25).collect())
            .collect();
        let s = Series::new("m", "H", vars).unwrap();
        let text = dataset_to_jsonl(&[s.clone()]);
        let back = parse_dataset(&text).unwrap();
        assert_eq!(back[0].n_variates(), 3);
        assert_eq!(back[0].len(), 100);
        assert_eq!(back[0], s);
    }

    #[test]
    fn window_offsets() {
        let offs = |n, c, h, s| {
            make_windows(&ramp(n), c, h, s)
                .unwrap()
                .iter()
                .map(|w| w.offset)
                .collect::<Vec<_>>()
        };
        assert_eq!(offs(10, 4, 2, 4), vec![0, 4]);
        assert!(offs(5, 4, 2, 1).is_empty());
        assert_eq!(offs(100, 64, 16, 10), vec![0, 10, 20]);
    }

    #[test]
    fn window_rejects_bad_parameters() {
        let s = ramp(10);
        assert!(make_windows(&s, 1, 2, 1).is_err());
        assert!(make_windows(&s, 4, 0, 1).is_err());
        assert!(make_windows(&s, 4, 2, 0).is_err());
    }

    #[test]
    fn window_is_contiguous() {
        let w = &make_windows(&ramp(20), 5, 3, 7).unwrap()[1];
        assert_eq!(w.context[0], vec![7.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(w.horizon[0], vec![12.0, 13.0, 14.0]);
    }

    #[test]
    fn standardize_constant_context() {
        let w = Window {
            context: vec![vec![2.0; 4]],
            horizon: vec![vec![2.0]],
            source_id: "c".into(),
            offset: 0,
        };
        let (n, st) = standardize_window(&w);
        assert_eq!(n.context[0], vec![0.0; 4]);
        assert_eq!(st.scale[0], SCALE_FLOOR);
    }

    #[test]
    fn standardize_two_points() {
        let w = Window {
            context: vec![vec![0.0, 2.0]],
            horizon: vec![vec![3.0]],
            source_id: "c".into(),
            offset: 0,
        };
        let (n, st) = standardize_window(&w);
        assert_eq!(st.mean[0], 1.0);
        assert_eq!(n.context[0], vec![-1.0, 1.0]);
        assert_eq!(n.horizon[0], vec![2.0]);
    }

    #[test]
    fn patchify_cases() {
        let x: Vec<f64> = (0..8).map(f64::from).collect();
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|q| q.n_valid() == 4));

        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[2].valid, vec![true, true, false, false]);
        assert_eq!(p[2].values, vec![8.0, 9.0, 0.0, 0.0]);

        let x = vec![1.0, 2.0, 3.0, 4.0];
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].values, x);

        assert!(patchify(&x, 0).is_err());
    }

    proptest! {
        #[test]
        fn standardize_round_trip(
            ctx in prop::collection::vec(-1e4f64..1e4, 2..64),
            hor in prop::collection::vec(-1e4f64..1e4, 1..16),
        ) {
            let w = Window { context: vec![ctx], horizon: vec![hor], source_id: "p".into(), offset: 0 };
            let (n, st) = standardize_window(&w);
            let back = destandardize_window(&n, &st);
            for (a, b) in w.context[0].iter().chain(&w.horizon[0]).zip(back.context[0].iter().chain(&back.horizon[0])) {
                prop_assert!((a - b).abs() < 1e-6 * (a.abs() + 1.0));
            }
        }

        #[test]
        fn windows_stay_in_bounds(n in 1usize..200, c in 2usize..40, h in 1usize..20, s in 1usize..15) {
            let series = ramp(n);
            let ws = make_windows(&series, c, h, s).unwrap();
            let mut prev = None;
            for w in &ws {
                prop_assert!(w.offset + c + h <= n);
                if let Some(p) = prev { prop_assert!(w.offset > p); }
                prev = Some(w.offset);
            }
        }
    }
}
