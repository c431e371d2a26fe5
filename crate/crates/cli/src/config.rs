//! Run configuration: built-in defaults, then the TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use vla_core::attention::FusionMethod;
use vla_core::model::ModelConfig;
use vla_core::sim::SimConfig;
use vla_core::teacher::AnnotateOptions;
use vla_core::tokenizer::Vocabulary;
use vla_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,

    pub lambda_r: f64,
    pub freeze: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub save_steps: usize,
    pub eval_every: usize,
    /// Episodes held out from the end of the training file for evaluation.
    pub eval_episodes: usize,
    /// 0 disables early stopping.
    pub early_stop_patience: usize,

    pub bins: usize,
    pub reasoning_budget: usize,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,

    pub grid_size: usize,
    pub views: usize,
    pub max_steps: usize,

    /// `rule` or `remote` (remote reads TEACHER_URL, TEACHER_API_KEY, TEACHER_TIMEOUT_S).
    pub teacher: String,
    pub teacher_retries: u32,
    pub teacher_base_delay_ms: u64,

    pub k: usize,
    pub method: FusionMethod,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let model = ModelConfig::default();
        let sim = SimConfig::default();
        let teacher = AnnotateOptions::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            workers: 1,
            lambda_r: train.lambda_r,
            freeze: model.n_layers / 2,
            lr: train.learning_rate,
            batch: train.batch_size,
            epochs: train.epochs,
            save_steps: train.save_steps,
            eval_every: 100,
            eval_episodes: 20,
            early_stop_patience: 0,
            bins: vla_core::tokenizer::DEFAULT_BINS,
            reasoning_budget: train.reasoning_budget,
            d_model: model.d_model,
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            d_ff: model.d_ff,
            max_seq_len: model.max_seq_len,
            grid_size: sim.grid_size,
            views: sim.views,
            max_steps: sim.max_steps,
            teacher: "rule".into(),
            teacher_retries: teacher.max_retries,
            teacher_base_delay_ms: teacher.base_delay.as_millis() as u64,
            k: vla_core::attention::DEFAULT_TOP_K,
            method: FusionMethod::Max,
        }
    }
}

/// Flags shared by every subcommand. Each overrides the config field of the same name.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML config file; unknown keys are rejected
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for annotation [default: 1]
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Weight of the reasoning loss [default: 0.3]
    #[arg(long = "lambda-r", global = true)]
    pub lambda_r: Option<f64>,
    /// Number of lower transformer blocks to freeze [default: 2]
    #[arg(long, global = true)]
    pub freeze: Option<usize>,
    /// Bins per action dimension [default: 32]
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    /// Maximum reasoning tokens per step [default: 244]
    #[arg(long = "reasoning-budget", global = true)]
    pub reasoning_budget: Option<usize>,
    /// Adam learning rate [default: 0.0002]
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Samples per optimizer step [default: 32]
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Passes over the training set [default: 1]
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Checkpoint period in steps [default: 500]
    #[arg(long = "save-steps", global = true)]
    pub save_steps: Option<usize>,
    /// Held-out evaluation period in steps, 0 for start and end only [default: 100]
    #[arg(long = "eval-every", global = true)]
    pub eval_every: Option<usize>,
    /// Simulator grid side length [default: 16]
    #[arg(long = "grid-size", global = true)]
    pub grid_size: Option<usize>,
    /// Layer-head scores fused per source position [default: 5]
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Reduction over the top k scores, max or mean [default: max]
    #[arg(long, global = true)]
    pub method: Option<FusionMethod>,
}

/// Fields settable by a flag, as (config key, flag).
pub const FLAGGED: &[(&str, &str)] = &[
    ("seed", "--seed"),
    ("out", "--out"),
    ("workers", "--workers"),
    ("lambda_r", "--lambda-r"),
    ("freeze", "--freeze"),
    ("bins", "--bins"),
    ("reasoning_budget", "--reasoning-budget"),
    ("lr", "--lr"),
    ("batch", "--batch"),
    ("epochs", "--epochs"),
    ("save_steps", "--save-steps"),
    ("eval_every", "--eval-every"),
    ("grid_size", "--grid-size"),
    ("k", "--k"),
    ("method", "--method"),
];

pub fn load_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_toml(&text).with_context(|| format!("config {}", path.display()))
}

pub fn parse_toml(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.to_string().replace('\n', " ").trim()))
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> Result<RunConfig> {
        let mut c = match &o.config {
            Some(p) => load_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { c.$f = v; } )* };
        }
        apply!(seed, out, workers, lambda_r, freeze, bins, reasoning_budget, lr, batch, epochs, save_steps, eval_every, grid_size, k, method);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        if !matches!(self.teacher.as_str(), "rule" | "remote") {
            bail!("teacher must be `rule` or `remote`, got `{}`", self.teacher);
        }
        if self.freeze > self.n_layers {
            bail!("freeze {} exceeds n_layers {}", self.freeze, self.n_layers);
        }
        self.sim().validate()?;
        self.train().validate(self.n_layers)?;
        Ok(())
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            grid_size: self.grid_size,
            views: self.views,
            max_steps: self.max_steps,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lambda_r: self.lambda_r,
            learning_rate: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            freeze_layers: self.freeze,
            seed: self.seed,
            save_steps: self.save_steps,
            reasoning_budget: self.reasoning_budget,
            eval_every: self.eval_every,
            early_stop_patience: (self.early_stop_patience > 0).then_some(self.early_stop_patience),
            out_dir: self.out.clone(),
        }
    }

    pub fn model(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.size(),
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            grid_size: self.grid_size,
            views: self.views,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn annotate_options(&self) -> AnnotateOptions {
        AnnotateOptions {
            workers: self.workers,
            max_retries: self.teacher_retries,
            base_delay: std::time::Duration::from_millis(self.teacher_base_delay_ms),
        }
    }
}
