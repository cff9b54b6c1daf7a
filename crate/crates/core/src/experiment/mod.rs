//! Experiment configuration and the commands behind the `affattn` binary.
//!
//! Each command reads its inputs, runs, and writes every output file
//! atomically into one directory. `AFFATTN_OUT`, when set, replaces the
//! configured output directory.

mod analyze;
mod compare;
mod gradcheck;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use analyze::{cmd_analyze, AnalyzeOptions, AnalyzeSummary};
pub use compare::{cmd_compare, CompareSummary, MethodSummary};
pub use gradcheck::{cmd_gradcheck, gradcheck_variant, params_table, GradCheckRow};
pub use train::{cmd_train, TrainOutcome};

use crate::error::{Error, Result};
use crate::fsutil::read_to_string;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const OUTPUT_ENV: &str = "AFFATTN_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub max_bytes: Option<usize>,
    /// Trailing share of the corpus kept out of training for analysis.
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("data/corpus.txt"),
            max_bytes: None,
            holdout_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// The one seed of the run; it replaces `model.seed` and `train.seed`.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    /// Compute attention diagnostics on a fixed held-out probe every N steps.
    pub diagnostics_every: Option<usize>,
    /// Save a checkpoint every N steps; the final step is always saved.
    pub checkpoint_every: Option<usize>,
    /// Teacher for distillation runs (`train.loss_kind = "forward_kl"`).
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "run".into(),
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/run"),
            diagnostics_every: None,
            checkpoint_every: Some(100),
            teacher_checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config document; any problem is a config error.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if self.model.vocab_size < crate::data::BYTE_VOCAB {
            return Err(Error::Config(format!(
                "byte-level data needs vocab_size >= 256, got {}",
                self.model.vocab_size
            )));
        }
        if !(self.data.holdout_fraction > 0.0 && self.data.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.holdout_fraction must lie in (0, 1), got {}",
                self.data.holdout_fraction
            )));
        }
        if self.diagnostics_every == Some(0) || self.checkpoint_every == Some(0) {
            return Err(Error::Config("schedules must be positive step counts".into()));
        }
        Ok(())
    }

    /// The configured output directory, unless `AFFATTN_OUT` overrides it.
    pub fn resolved_output_dir(&self) -> PathBuf {
        output_dir_or_env(&self.output_dir)
    }
}

pub fn output_dir_or_env(configured: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.to_path_buf(),
    }
}
