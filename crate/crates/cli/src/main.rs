//! `ame`: experiments for structure-guided sparse MoE forecasting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ame_core::descriptors::{structural_profile, RegimeProfile};
use ame_core::experiment::{
    self, run_ablate, run_analyze, run_eval, run_finetune, run_train, train_regime, write_json, ExperimentConfig,
    JsonlWriter,
};
use ame_core::series::{load_dataset, save_dataset};
use ame_core::synthetic::{gen_synthetic, into_dataset, SyntheticSpec};
use ame_core::training::Checkpoint;

#[derive(Parser)]
#[command(name = "ame", version, about = "Structure-guided sparse MoE forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every experiment command.
#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the model preset (and any explicit backbone).
    #[arg(long)]
    preset: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.preset {
            cfg.model.preset = p.clone();
            cfg.model.backbone = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus as JSONL.
    Synth {
        /// Generator spec (JSON); `--count`, `--length` and `--seed` override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytical descriptor profile of every variate of a dataset.
    Profile {
        #[arg(long)]
        data: PathBuf,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the regime predictor on the training corpus.
    TrainRegime(Common),
    /// Train the configured variant.
    Train(Common),
    /// Score a checkpoint (or seasonal naive) against seasonal naive.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "naive")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the seasonal-naive adapter itself.
        #[arg(long)]
        naive: bool,
    },
    /// Capture probe routing and fine-tune on the shifted corpus.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Separation, usage and anchoring statistics of a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// RC log of a fine-tuning run to include.
        #[arg(long)]
        rc_log: Option<PathBuf>,
    },
    /// Train and compare every configured variant.
    Ablate(Common),
}

#[derive(Serialize)]
struct ProfileLine<'a> {
    id: &'a str,
    variate: usize,
    #[serde(flatten)]
    profile: Option<RegimeProfile<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            count,
            length,
            seed,
            out,
        } => {
            let mut spec = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SyntheticSpec::new(1000, 256, 0),
            };
            spec.count = count.unwrap_or(spec.count);
            spec.length = length.unwrap_or(spec.length);
            spec.seed = seed.unwrap_or(spec.seed);
            let data = into_dataset(gen_synthetic(&spec)?);
            save_dataset(&out, &data)?;
            log::info!("wrote {} series to {}", data.len(), out.display());
        }
        Command::Profile { data, out } => {
            let data = load_dataset(&data)?;
            let mut w = JsonlWriter::create(&out)?;
            for s in &data {
                for (variate, v) in s.variates.iter().enumerate() {
                    let (profile, error) = match structural_profile(v) {
                        Ok(p) => (Some(p), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    w.write(&ProfileLine {
                        id: &s.id,
                        variate,
                        profile,
                        error,
                    })?;
                }
            }
            w.finish()?;
        }
        Command::TrainRegime(c) => {
            let cfg = c.load()?;
            std::fs::create_dir_all(&c.out)?;
            let data = cfg.data.train.load()?;
            let (source, report) = train_regime(&cfg, &data)?;
            write_json(&c.out.join("regime.json"), &source)?;
            write_json(&c.out.join("regime_report.json"), &report)?;
            log::info!("validation spearman {:?}", report.val_spearman);
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let run = run_train(&cfg, &c.out)?;
            if let Some(l) = run.logs.last() {
                log::info!("step {}: total {:.4}, task {:.4}", l.step, l.l_total, l.l_task);
            }
        }
        Command::Eval {
            common,
            checkpoint,
            naive,
        } => {
            let cfg = common.load()?;
            let ckpt = match (checkpoint, naive) {
                (Some(dir), false) => Some(load_checkpoint(&dir)?),
                (None, true) => None,
                _ => bail!("pass either --checkpoint <dir> or --naive"),
            };
            let out = run_eval(&cfg, ckpt.as_ref(), &common.out)?;
            let a = out.metrics.aggregate;
            println!("{}: mase {:.4} smape {:.4} mae {:.4} rmse {:.4}", out.model, a.mase, a.smape, a.mae, a.rmse);
        }
        Command::Finetune { common, checkpoint } => {
            let cfg = common.load()?;
            let ft = run_finetune(&cfg, load_checkpoint(&checkpoint)?, &common.out)?;
            if let Some(r) = ft.rc_log.last() {
                println!("RC at step {}: {:.4}", r.step, r.rc);
            }
        }
        Command::Analyze {
            common,
            checkpoint,
            rc_log,
        } => {
            let cfg = common.load()?;
            let a = run_analyze(&cfg, &load_checkpoint(&checkpoint)?, rc_log.as_deref(), &common.out)?;
            for s in &a.separation {
                println!("layer {} {:?}: CH {:?} over {} clusters", s.layer, s.space, s.ch, s.clusters);
            }
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let rows = run_ablate(&cfg, &c.out)?;
            print!("{}", experiment::ablation_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
