//! Optimizer, training loop, evaluation and checkpoint files.
//!
//! Checkpoint layout: magic `RHYK`, version `u16`, header length `u64`, a
//! JSON header (configuration, progress, validation history, backbone
//! checksum and a section table), the tensors of every section as
//! little-endian `f64`, and finally the SHA-256 of all preceding bytes.

mod checkpoint;
mod optim;
mod trainer;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DEFAULT_RATIOS};
use crate::exec::Execution;
use crate::metrics::{MetricsError, DEFAULT_TOP_K};
use crate::model::{ModelConfig, ModelError};
use crate::numerics::NumericsError;
use crate::semantic::{EmbedderSpec, SemanticError};

pub use checkpoint::{read_backbone, read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use trainer::{
    build_embedder, evaluate, Dataset, EpochRecord, PredictionReport, PreparedSplit, Progress, StepRecord, Trainer,
    GRADIENT_CHUNK,
};

pub const LEARNING_RATES: [f64; 3] = [1e-4, 3e-4, 5e-4];
pub const WEIGHT_DECAYS: [f64; 3] = [0.0, 0.001, 0.01];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, step {step} (user {user_id}, day {target_day})")]
    NonFiniteLoss { epoch: usize, step: u64, user_id: u64, target_day: u32 },
    #[error("split {0} has no samples")]
    EmptySplit(&'static str),
    #[error("{0} tensors are registered with both the optimizer and the frozen backbone")]
    FrozenInOptimizer(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Everything a training run depends on besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Ranking length kept per predicted slot.
    pub top_k: usize,
    pub split_ratios: (f64, f64, f64),
    pub execution: Execution,
    pub embedder: EmbedderSpec,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            clip_norm: 1.0,
            top_k: DEFAULT_TOP_K,
            split_ratios: DEFAULT_RATIOS,
            execution: Execution::default(),
            embedder: EmbedderSpec::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !LEARNING_RATES.contains(&self.learning_rate) {
            return bad(format!("learning_rate {} not in {LEARNING_RATES:?}", self.learning_rate));
        }
        if !WEIGHT_DECAYS.contains(&self.weight_decay) {
            return bad(format!("weight_decay {} not in {WEIGHT_DECAYS:?}", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.top_k < 5 {
            return bad(format!("top_k {} must be at least 5", self.top_k));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_owned(), source })?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }
}
