use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::analysis::{analyze, capture, capture_probe_set, probe_windows, window_family, Analysis};
use super::config::{ExperimentConfig, RegimeKind, Settings, Variant};
use super::eval::{evaluate, EvalOutcome, Forecaster, ModelForecaster, SeasonalNaive};
use super::inference::{AdditivePrior, Inference};
use crate::backbone::ModelState;
use crate::error::{AmeError, Result};
use crate::metrics::ProbeSet;
use crate::prior::GateParams;
use crate::regime::{build_label_table, train_regime_predictor, RegimeSource, RegimeTrainReport};
use crate::series::{Dataset, Series, Window};
use crate::training::{step_batch, train, train_step, Checkpoint, OptimState, StepLog};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const RC_LOG: &str = "rc_log.jsonl";
pub const PROBE_FILE: &str = "probe.json";
pub const ANALYSIS_FILE: &str = "analysis.jsonl";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TSV: &str = "ablation.tsv";

/// Offset of the probe-window seed from the experiment seed.
const PROBE_SEED_OFFSET: u64 = 0x9e37_79b9;

/// Line-per-record JSON output.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = File::create(&path).map_err(|e| AmeError::io(&path, e))?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
            path,
        })
    }

    pub fn write<S: Serialize>(&mut self, record: &S) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| AmeError::invalid(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| AmeError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| AmeError::io(&self.path, e))
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AmeError::invalid(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| AmeError::io(path, e))
}

pub fn read_jsonl<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let text = fs::read_to_string(path).map_err(|e| AmeError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AmeError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AmeError::io(dir, e))
}

fn require(source: &Option<super::config::DataSource>, field: &str) -> Result<Dataset<f64>> {
    source
        .as_ref()
        .ok_or_else(|| AmeError::Config {
            path: field.into(),
            message: "required by this command".into(),
        })?
        .load()
}

/// Corpus the probe windows come from.
pub fn probe_data(cfg: &ExperimentConfig) -> Result<Dataset<f64>> {
    let d = &cfg.data;
    d.probe
        .as_ref()
        .or(d.finetune.as_ref())
        .or(d.eval.as_ref())
        .unwrap_or(&d.train)
        .load()
}

/// The seeded probe windows of an experiment.
pub fn experiment_probes(cfg: &ExperimentConfig, data: &[Series<f64>]) -> Result<Vec<Window<f64>>> {
    probe_windows(
        data,
        cfg.finetune.probe_windows,
        cfg.train.context_len,
        cfg.train.horizon_len,
        cfg.seed.wrapping_add(PROBE_SEED_OFFSET),
    )
}

/// Fit a frozen regime predictor on labeled crops of `data`.
pub fn train_regime(cfg: &ExperimentConfig, data: &[Series<f64>]) -> Result<(RegimeSource, RegimeTrainReport)> {
    let (crops, norm) = build_label_table(data, cfg.regime.n_crops, cfg.regime.crop_len, cfg.seed)?;
    let mut rcfg = cfg.regime.train.clone();
    rcfg.seed = cfg.seed;
    let (pred, report) = train_regime_predictor(&crops, &norm, &rcfg)?;
    Ok((RegimeSource::Learned(Box::new(pred)), report))
}

/// The regime source a run trains with.
pub fn regime_source(cfg: &ExperimentConfig, train_data: &[Series<f64>]) -> Result<RegimeSource> {
    match (cfg.regime.source, &cfg.regime.predictor) {
        (RegimeKind::Oracle, _) => {
            let (_, norm) = build_label_table(train_data, cfg.regime.n_crops, cfg.regime.crop_len, cfg.seed)?;
            Ok(RegimeSource::Oracle(norm))
        }
        (RegimeKind::Learned, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| AmeError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| AmeError::Parse {
                line: e.line(),
                message: e.to_string(),
            })
        }
        (RegimeKind::Learned, None) => Ok(train_regime(cfg, train_data)?.0),
    }
}

pub fn init_model(settings: &Settings, seed: u64) -> Result<ModelState<f32>> {
    let g = settings.gate;
    let gate = GateParams {
        alpha: g.alpha as f32,
        b: g.b as f32,
        learnable: g.learnable,
    };
    ModelState::init(settings.backbone, gate, seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunMetadata {
    variant: Variant,
    config: ExperimentConfig,
}

/// A trained model with its training log.
#[derive(Debug, Clone)]
pub struct Run {
    pub checkpoint: Checkpoint<f32>,
    pub logs: Vec<StepLog>,
}

/// Train a fresh model of one variant.
pub fn train_run(
    cfg: &ExperimentConfig,
    settings: &Settings,
    data: &[Series<f64>],
    source: &RegimeSource,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<Run> {
    let mut model = init_model(settings, cfg.seed)?;
    let mut opt = OptimState::new(&model);
    let logs = train(&mut model, &mut opt, data, &settings.train, &settings.objective(), source, on_step)?;
    let mut checkpoint = Checkpoint::new(model, settings.map.clone(), settings.gate.learnable);
    checkpoint.step = opt.step;
    checkpoint.optim = Some(opt);
    checkpoint.regime = Some(source.clone());
    checkpoint.metadata = serde_json::to_value(RunMetadata {
        variant: settings.variant,
        config: cfg.clone(),
    })
    .map_err(|e| AmeError::invalid(e.to_string()))?;
    Ok(Run { checkpoint, logs })
}

/// Config and variant a checkpoint was trained with.
pub fn checkpoint_config(ckpt: &Checkpoint<f32>) -> Result<(ExperimentConfig, Variant)> {
    let m: RunMetadata = serde_json::from_value(ckpt.metadata.clone()).map_err(|e| AmeError::Checkpoint(format!("metadata: {e}")))?;
    Ok((m.config, m.variant))
}

/// Inference view of a checkpoint under its variant's settings.
pub fn inference<'a>(ckpt: &'a Checkpoint<f32>, settings: &Settings, source: &'a RegimeSource) -> Inference<'a> {
    let additive = match (settings.additive_beta, &ckpt.map) {
        (Some(beta), Some(map)) => Some(AdditivePrior {
            source,
            map,
            beta,
            drop: settings.drop,
        }),
        _ => None,
    };
    Inference {
        model: &ckpt.model,
        additive,
        gate_learnable: ckpt.gate_learnable,
    }
}

fn checkpoint_source(ckpt: &Checkpoint<f32>) -> Result<&RegimeSource> {
    ckpt.regime
        .as_ref()
        .ok_or_else(|| AmeError::Checkpoint("checkpoint carries no regime source".into()))
}

/// `train`: writes the resolved config, the step log and the checkpoint.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<Run> {
    create_dir(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json()).map_err(|e| AmeError::io(out.join(CONFIG_FILE), e))?;
    let data = cfg.data.train.load()?;
    let source = regime_source(cfg, &data)?;
    let settings = cfg.settings(cfg.variant)?;
    let mut log = JsonlWriter::create(out.join(TRAIN_LOG))?;
    let run = train_run(cfg, &settings, &data, &source, &mut |l| log.write(l))?;
    log.finish()?;
    run.checkpoint.save(out.join(CHECKPOINT_DIR))?;
    Ok(run)
}

/// Score a checkpoint, or the seasonal-naive adapter when `ckpt` is `None`.
pub fn eval_run(cfg: &ExperimentConfig, ckpt: Option<&Checkpoint<f32>>) -> Result<EvalOutcome> {
    let data = require(&cfg.data.eval, "data.eval")?;
    match ckpt {
        None => evaluate(&SeasonalNaive, &data, &cfg.eval, cfg.train.context_len),
        Some(c) => {
            let (_, variant) = checkpoint_config(c)?;
            let settings = cfg.settings(variant)?;
            let f = ModelForecaster {
                name: variant.name(),
                inference: inference(c, &settings, checkpoint_source(c)?),
            };
            evaluate(&f as &dyn Forecaster, &data, &cfg.eval, cfg.train.context_len)
        }
    }
}

pub fn run_eval(cfg: &ExperimentConfig, ckpt: Option<&Checkpoint<f32>>, out: &Path) -> Result<EvalOutcome> {
    create_dir(out)?;
    let outcome = eval_run(cfg, ckpt)?;
    write_json(&out.join(METRICS_FILE), &outcome)?;
    Ok(outcome)
}

/// One routing-consistency measurement during fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcRecord {
    /// Completed fine-tuning steps.
    pub step: usize,
    pub rc: f64,
    pub l_task: Option<f64>,
    pub l_total: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Finetuned {
    pub checkpoint: Checkpoint<f32>,
    pub probe: ProbeSet,
    pub rc_log: Vec<RcRecord>,
    pub logs: Vec<StepLog>,
}

/// Capture the probe routing, then fine-tune with the same objective and a
/// fresh optimizer, measuring RC every `rc_every` steps and at the end.
pub fn finetune_run(
    cfg: &ExperimentConfig,
    mut ckpt: Checkpoint<f32>,
    data: &[Series<f64>],
    probes: &[Window<f64>],
    on_record: &mut dyn FnMut(&RcRecord) -> Result<()>,
) -> Result<Finetuned> {
    let (_, variant) = checkpoint_config(&ckpt)?;
    let settings = cfg.settings(variant)?;
    let source = checkpoint_source(&ckpt)?.clone();
    let probe = capture_probe_set(&inference(&ckpt, &settings, &source), probes)?;
    let mut rc_log = Vec::new();
    let mut record = |r: RcRecord, log: &mut Vec<RcRecord>| -> Result<()> {
        on_record(&r)?;
        log.push(r);
        Ok(())
    };
    let now = capture(&inference(&ckpt, &settings, &source), probes)?;
    record(
        RcRecord {
            step: 0,
            rc: probe.routing_consistency(&now)?,
            l_task: None,
            l_total: None,
        },
        &mut rc_log,
    )?;
    let tcfg = cfg.finetune_train();
    let ctx = settings.objective();
    let mut opt = OptimState::new(&ckpt.model);
    let mut logs = Vec::with_capacity(tcfg.steps);
    while opt.step < tcfg.steps {
        let batch = step_batch(&ckpt.model, data, &tcfg, &ctx, &source, opt.step)?;
        let log = train_step(&mut ckpt.model, &mut opt, &batch, &ctx, &tcfg)?;
        let done = opt.step;
        if done % cfg.finetune.rc_every == 0 || done == tcfg.steps {
            let now = capture(&inference(&ckpt, &settings, &source), probes)?;
            record(
                RcRecord {
                    step: done,
                    rc: probe.routing_consistency(&now)?,
                    l_task: Some(log.l_task),
                    l_total: Some(log.l_total),
                },
                &mut rc_log,
            )?;
        }
        logs.push(log);
    }
    ckpt.step += opt.step;
    ckpt.optim = Some(opt);
    Ok(Finetuned {
        checkpoint: ckpt,
        probe,
        rc_log,
        logs,
    })
}

/// `finetune`: probe set, RC log and the fine-tuned checkpoint.
pub fn run_finetune(cfg: &ExperimentConfig, ckpt: Checkpoint<f32>, out: &Path) -> Result<Finetuned> {
    create_dir(out)?;
    let data = require(&cfg.data.finetune, "data.finetune")?;
    let probes = experiment_probes(cfg, &probe_data(cfg)?)?;
    let mut log = JsonlWriter::create(out.join(RC_LOG))?;
    let ft = finetune_run(cfg, ckpt, &data, &probes, &mut |r| log.write(r))?;
    log.finish()?;
    write_json(&out.join(PROBE_FILE), &ft.probe)?;
    ft.checkpoint.save(out.join(CHECKPOINT_DIR))?;
    Ok(ft)
}

/// Analysis of a checkpoint over the experiment's probe windows.
pub fn analysis_run(cfg: &ExperimentConfig, ckpt: &Checkpoint<f32>) -> Result<Analysis> {
    let (_, variant) = checkpoint_config(ckpt)?;
    let settings = cfg.settings(variant)?;
    let data = probe_data(cfg)?;
    let windows = experiment_probes(cfg, &data)?;
    let families: Vec<_> = windows.iter().map(|w| window_family(&data, w)).collect();
    // baselines are read through the AME anchoring of the same expert pool
    let map = match &ckpt.map {
        Some(m) => Some(m.clone()),
        None if ckpt.model.config.experts_total > 1 => Some(cfg.anchor_map()?),
        None => None,
    };
    let source = checkpoint_source(ckpt)?;
    analyze(&inference(ckpt, &settings, source), &windows, &families, map.as_ref())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum AnalysisLine<'a> {
    Rc(&'a RcRecord),
    Separation(&'a super::analysis::Separation),
    Usage { layer: usize, counts: &'a [usize], entropy: f64 },
    Anchored(&'a super::analysis::AnchoredShare),
}

/// `analyze`: JSONL with RC per logged step (when `rc_log` is given) and
/// separation, usage and anchoring statistics.
pub fn run_analyze(cfg: &ExperimentConfig, ckpt: &Checkpoint<f32>, rc_log: Option<&Path>, out: &Path) -> Result<Analysis> {
    create_dir(out)?;
    let analysis = analysis_run(cfg, ckpt)?;
    let mut w = JsonlWriter::create(out.join(ANALYSIS_FILE))?;
    if let Some(p) = rc_log {
        for r in read_jsonl::<RcRecord>(p)? {
            w.write(&AnalysisLine::Rc(&r))?;
        }
    }
    for s in &analysis.separation {
        w.write(&AnalysisLine::Separation(s))?;
    }
    for (layer, (counts, &entropy)) in analysis.usage.counts.iter().zip(&analysis.usage.entropy).enumerate() {
        w.write(&AnalysisLine::Usage { layer, counts, entropy })?;
    }
    for a in &analysis.anchored {
        w.write(&AnalysisLine::Anchored(a))?;
    }
    w.finish()?;
    Ok(analysis)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub experts_total: usize,
    pub lambda_prior: f64,
    pub lambda_ortho: f64,
    /// Means over the last tenth of training.
    pub l_total: f64,
    pub l_task: f64,
    pub usage_entropy: f64,
    /// Aggregate ratios against seasonal naive, when an eval corpus is set.
    pub mase_ratio: Option<f64>,
    pub smape_ratio: Option<f64>,
    pub mae_ratio: Option<f64>,
    pub rmse_ratio: Option<f64>,
}

fn tail_mean(logs: &[StepLog], f: impl Fn(&StepLog) -> f64) -> f64 {
    let n = (logs.len() / 10).max(1).min(logs.len());
    if n == 0 {
        return f64::NAN;
    }
    logs[logs.len() - n..].iter().map(f).sum::<f64>() / n as f64
}

/// `ablate`: every configured variant from the same seed, one subfolder
/// each, plus a comparison table.
pub fn run_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    create_dir(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json()).map_err(|e| AmeError::io(out.join(CONFIG_FILE), e))?;
    let data = cfg.data.train.load()?;
    let source = regime_source(cfg, &data)?;
    let mut rows = Vec::new();
    for &variant in &cfg.ablate.variants {
        let settings = cfg.settings(variant)?;
        let dir = out.join(variant.name());
        create_dir(&dir)?;
        log::info!("ablation cell {}", variant.name());
        let mut log = JsonlWriter::create(dir.join(TRAIN_LOG))?;
        let run = train_run(cfg, &settings, &data, &source, &mut |l| log.write(l))?;
        log.finish()?;
        run.checkpoint.save(dir.join(CHECKPOINT_DIR))?;
        let eval = match &cfg.data.eval {
            Some(_) => Some(run_eval(cfg, Some(&run.checkpoint), &dir)?),
            None => None,
        };
        let agg = eval.as_ref().map(|e| e.metrics.aggregate);
        rows.push(AblationRow {
            variant: variant.name(),
            experts_total: settings.backbone.experts_total,
            lambda_prior: settings.loss.lambda_prior,
            lambda_ortho: settings.loss.lambda_ortho,
            l_total: tail_mean(&run.logs, |l| l.l_total),
            l_task: tail_mean(&run.logs, |l| l.l_task),
            usage_entropy: tail_mean(&run.logs, |l| l.expert_usage_entropy),
            mase_ratio: agg.map(|a| a.mase),
            smape_ratio: agg.map(|a| a.smape),
            mae_ratio: agg.map(|a| a.mae),
            rmse_ratio: agg.map(|a| a.rmse),
        });
    }
    write_json(&out.join(ABLATION_JSON), &rows)?;
    fs::write(out.join(ABLATION_TSV), ablation_table(&rows)).map_err(|e| AmeError::io(out.join(ABLATION_TSV), e))?;
    Ok(rows)
}

/// Tab-separated comparison table with a header row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut s = String::from("variant\texperts\tl_total\tl_task\tusage_entropy\tmase\tsmape\tmae\trmse\n");
    for r in rows {
        s += &format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.3}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.experts_total,
            r.l_total,
            r.l_task,
            r.usage_entropy,
            opt(r.mase_ratio),
            opt(r.smape_ratio),
            opt(r.mae_ratio),
            opt(r.rmse_ratio)
        );
    }
    s
}
