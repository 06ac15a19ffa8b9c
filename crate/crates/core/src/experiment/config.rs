use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::descriptors::Descriptor;
use crate::error::{AmeError, Result};
use crate::prior::{AnchorMap, GateParams};
use crate::regime::RegimeTrainConfig;
use crate::series::{load_dataset, Dataset};
use crate::synthetic::{gen_synthetic, into_dataset, SyntheticSpec};
use crate::training::{KlDirection, LossConfig, ObjectiveContext, OptimConfig, TrainConfig};

/// A dataset given either as a JSONL file or as a generator spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset<f64>> {
        match self {
            DataSource::Path(p) => load_dataset(p),
            DataSource::Synthetic(spec) => Ok(into_dataset(gen_synthetic(spec)?)),
        }
    }

    /// Relative paths are taken relative to `base` (the config's folder).
    fn rebase(&mut self, base: &Path) {
        if let DataSource::Path(p) = self {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    #[serde(default)]
    pub eval: Option<DataSource>,
    /// Distribution-shifted corpus for the stability experiment.
    #[serde(default)]
    pub finetune: Option<DataSource>,
    /// Source of probe windows; defaults to the fine-tuning corpus.
    #[serde(default)]
    pub probe: Option<DataSource>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: DataSource::Synthetic(SyntheticSpec::new(512, 256, 0)),
            eval: None,
            finetune: None,
            probe: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: String,
    /// Overrides the preset entirely when present.
    pub backbone: Option<BackboneConfig>,
    /// Shared experts; the rest are anchored. Defaults to a fifth of the pool.
    pub shared_experts: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: "tiny".into(),
            backbone: None,
            shared_experts: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub alpha: f64,
    pub b: f64,
    pub learnable: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        let g = GateParams::<f64>::default();
        GateConfig {
            alpha: g.alpha,
            b: g.b,
            learnable: g.learnable,
        }
    }
}

impl GateConfig {
    pub fn params(&self) -> GateParams<f64> {
        GateParams {
            alpha: self.alpha,
            b: self.b,
            learnable: self.learnable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    /// Analytical descriptors through a normalizer fitted on the training
    /// corpus.
    #[default]
    Oracle,
    /// A frozen learned predictor, loaded from `predictor` or trained on the
    /// training corpus.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeConfig {
    pub source: RegimeKind,
    pub predictor: Option<PathBuf>,
    pub n_crops: usize,
    pub crop_len: usize,
    pub train: RegimeTrainConfig,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        RegimeConfig {
            source: RegimeKind::Oracle,
            predictor: None,
            n_crops: 4000,
            crop_len: 64,
            train: RegimeTrainConfig::default(),
        }
    }
}

/// Model family of a run. Exactly one is active per run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Variant {
    #[default]
    Ame,
    /// One always-on feed-forward path, no routing.
    Dense,
    /// Sparse routing trained on the task loss only.
    StandardMoe,
    ReverseKl,
    /// The prior enters as a fixed logit offset instead of a loss.
    AdditivePrior { beta: f64 },
    DropDescriptor { descriptor: Descriptor },
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Ame => "ame".into(),
            Variant::Dense => "dense".into(),
            Variant::StandardMoe => "standard-moe".into(),
            Variant::ReverseKl => "reverse-kl".into(),
            Variant::AdditivePrior { beta } => format!("additive-prior({beta})"),
            Variant::DropDescriptor { descriptor } => format!("drop-{}", descriptor.name()),
        }
    }

    /// The full ablation matrix.
    pub fn matrix() -> Vec<Variant> {
        let mut v = vec![
            Variant::Ame,
            Variant::Dense,
            Variant::StandardMoe,
            Variant::ReverseKl,
            Variant::AdditivePrior { beta: 1.0 },
        ];
        v.extend(Descriptor::ALL.map(|descriptor| Variant::DropDescriptor { descriptor }));
        v
    }
}

/// Eight context lengths spaced geometrically from 32 to 512 observations.
pub fn default_context_grid() -> Vec<usize> {
    (0..8)
        .map(|i| (32.0 * 16f64.powf(i as f64 / 7.0)).round() as usize)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupBy {
    /// Series label, falling back to the frequency tag.
    #[default]
    Label,
    Freq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub horizon_len: usize,
    /// Context length without a sweep; defaults to the training one.
    pub context_len: Option<usize>,
    /// Pick the context length per task on a validation window.
    pub sweep: bool,
    pub context_lengths: Vec<usize>,
    pub group_by: GroupBy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizon_len: 16,
            context_len: None,
            sweep: false,
            context_lengths: default_context_grid(),
            group_by: GroupBy::Label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Routing consistency is logged every this many steps.
    pub rc_every: usize,
    pub probe_windows: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 2000,
            lr: 3e-4,
            warmup_steps: 50,
            rc_every: 100,
            probe_windows: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: Variant::matrix(),
        }
    }
}

/// One experiment, as read from a JSON file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Drives initialization, batch sampling and every derived seed.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub gate: GateConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub regime: RegimeConfig,
    pub variant: Variant,
    pub eval: EvalConfig,
    pub finetune: FinetuneConfig,
    pub ablate: AblateConfig,
}

fn config_error(path: &str, message: impl Into<String>) -> AmeError {
    AmeError::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn at(path: &'static str) -> impl Fn(AmeError) -> AmeError {
    move |e| config_error(path, e.to_string())
}

impl ExperimentConfig {
    /// Parse and validate. Errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; relative data paths resolve against its folder.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AmeError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let d = &mut cfg.data;
        d.train.rebase(base);
        for s in [&mut d.eval, &mut d.finetune, &mut d.probe].into_iter().flatten() {
            s.rebase(base);
        }
        if let Some(p) = &mut cfg.regime.predictor {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let backbone = self.backbone()?;
        backbone.validate().map_err(at("model.backbone"))?;
        if backbone.experts_total > 1 {
            self.anchor_map()?;
        }
        self.gate.params().validate().map_err(at("gate"))?;
        self.loss.validate().map_err(at("loss"))?;
        if self.train.seed != 0 {
            return Err(config_error("train.seed", "use the top-level `seed`"));
        }
        self.train.validate().map_err(at("train"))?;
        self.regime.train.validate().map_err(at("regime.train"))?;
        if self.eval.horizon_len == 0 {
            return Err(config_error("eval.horizon_len", "must be positive"));
        }
        if self.eval.sweep && self.eval.context_lengths.is_empty() {
            return Err(config_error("eval.context_lengths", "sweep needs at least one candidate"));
        }
        if let Some(i) = self.eval.context_lengths.iter().position(|&c| c < crate::regime::MIN_INPUT) {
            return Err(config_error(
                &format!("eval.context_lengths[{i}]"),
                format!("must be at least {}", crate::regime::MIN_INPUT),
            ));
        }
        if self.finetune.rc_every == 0 || !(self.finetune.lr > 0.0) {
            return Err(config_error("finetune", "rc_every and lr must be positive"));
        }
        if let Variant::AdditivePrior { beta } = self.variant {
            if !(beta.is_finite() && beta > 0.0) {
                return Err(config_error("variant.additive-prior.beta", "must be positive"));
            }
        }
        Ok(())
    }

    /// The configured encoder before any variant adjustment.
    pub fn backbone(&self) -> Result<BackboneConfig> {
        match self.model.backbone {
            Some(b) => Ok(b),
            None => BackboneConfig::preset(&self.model.preset).ok_or_else(|| {
                config_error(
                    "model.preset",
                    format!("unknown preset `{}`; known: {:?}", self.model.preset, BackboneConfig::PRESETS),
                )
            }),
        }
    }

    /// Anchoring of the configured (sparse) expert pool. Also used to read
    /// baselines' routing through the same expert indices.
    pub fn anchor_map(&self) -> Result<AnchorMap> {
        let total = self.backbone()?.experts_total;
        let shared = self.model.shared_experts.unwrap_or(total / 5);
        if shared > total {
            return Err(config_error("model.shared_experts", "exceeds the expert count"));
        }
        AnchorMap::new(total - shared, shared).map_err(at("model.shared_experts"))
    }

    /// Everything a run needs once the variant is applied.
    pub fn settings(&self, variant: Variant) -> Result<Settings> {
        let mut backbone = self.backbone()?;
        let mut loss = self.loss.clone();
        let mut map = Some(self.anchor_map()?);
        let mut additive_beta = None;
        let mut drop = None;
        match variant {
            Variant::Ame => {}
            Variant::Dense => {
                backbone = backbone.dense();
                map = None;
                loss.lambda_prior = 0.0;
                loss.lambda_ortho = 0.0;
            }
            Variant::StandardMoe => {
                map = None;
                loss.lambda_prior = 0.0;
                loss.lambda_ortho = 0.0;
            }
            Variant::ReverseKl => loss.kl_direction = KlDirection::Reverse,
            Variant::AdditivePrior { beta } => {
                loss.lambda_prior = 0.0;
                additive_beta = Some(beta);
            }
            Variant::DropDescriptor { descriptor } => drop = Some(descriptor),
        }
        let mut train = self.train.clone();
        train.seed = self.seed;
        Ok(Settings {
            variant,
            backbone,
            map,
            gate: self.gate.params(),
            loss,
            additive_beta,
            drop,
            train,
        })
    }

    /// Optimizer of the fine-tuning stage.
    pub fn finetune_train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.finetune.steps,
            seed: self.seed.wrapping_add(FINETUNE_SEED_OFFSET),
            optim: OptimConfig {
                lr: self.finetune.lr,
                warmup_steps: self.finetune.warmup_steps,
                ..self.train.optim.clone()
            },
            ..self.train.clone()
        }
    }
}

/// Keeps the fine-tuning batches disjoint in stream from pretraining.
pub const FINETUNE_SEED_OFFSET: u64 = 0x5eed_f1e7;

/// A config resolved for one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    /// `None` for models without a structural prior.
    pub map: Option<AnchorMap>,
    pub gate: GateParams<f64>,
    pub loss: LossConfig,
    pub additive_beta: Option<f64>,
    pub drop: Option<Descriptor>,
    pub train: TrainConfig,
}

impl Settings {
    pub fn objective(&self) -> ObjectiveContext<'_> {
        ObjectiveContext {
            loss: &self.loss,
            map: self.map.as_ref(),
            gate_learnable: self.gate.learnable,
            additive_beta: self.additive_beta,
            drop: self.drop,
        }
    }
}
