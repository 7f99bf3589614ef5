//! Fusion of segment tokens with prompt embeddings, the frozen backbone and
//! the location head.

mod backbone;
mod gradcheck;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, GridSpec, PredictionSample, HISTORY_DAYS, HORIZON, SLOTS_PER_DAY};
use crate::encoder::{EncoderDims, EncoderError, EncoderParams};
use crate::numerics::{init, NumericsError, ParamRef, ParamSet, Tape, Tensor, Var};
use crate::semantic::{SampleSemantics, SemanticError};
use crate::tokenizer::{TokenizerConfig, TokenizerError, TokenizerParams};

pub use backbone::{Backbone, BackboneMeta, BackboneSpec, STAGE_BACKBONE};
pub use gradcheck::{end_to_end_gradcheck, GradcheckReport, GradcheckSetup};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("backbone checksum mismatch: recorded {recorded}, computed {computed}")]
    ChecksumMismatch { recorded: String, computed: String },
    #[error("invalid backbone: {0}")]
    BadBackbone(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Drop the intra- and inter-segment attention stacks.
    pub no_hierarchical_attention: bool,
    /// Feed every slot encoding to the backbone instead of segment tokens.
    pub no_tokenization: bool,
    /// Zero the per-day history prompt embeddings.
    pub no_traj_info: bool,
    /// Zero the task prompt embedding.
    pub no_task_desc: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    #[serde(default)]
    pub encoder: EncoderDims,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    pub grid: GridSpec,
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            encoder: EncoderDims::default(),
            tokenizer: TokenizerConfig::default(),
            grid: GridSpec::new(20, 20).expect("nonzero grid"),
            backbone: BackboneSpec::FrozenRandom { layers: 2, heads: 4, seed: 0 },
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let heads = self.tokenizer.heads;
        if self.dim == 0 || heads == 0 || self.dim % heads != 0 {
            return Err(ModelError::InvalidConfig(format!("dim {} must be a positive multiple of heads {heads}", self.dim)));
        }
        if self.tokenizer.segment_len == 0 || (HISTORY_DAYS * SLOTS_PER_DAY) % self.tokenizer.segment_len != 0 {
            return Err(ModelError::InvalidConfig(format!("segment length {} must divide 336", self.tokenizer.segment_len)));
        }
        if !(0.0..1.0).contains(&self.tokenizer.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} outside [0, 1)", self.tokenizer.dropout)));
        }
        Ok(())
    }
}

/// The full predictor: trainable encoder, tokenizer and head, plus a frozen
/// backbone whose tensors live in a separate set that no optimizer sees.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub trainable: ParamSet,
    pub frozen: ParamSet,
    pub encoder: EncoderParams,
    pub tokenizer: TokenizerParams,
    pub backbone: Backbone,
    pub head_weight: ParamRef,
    pub head_bias: ParamRef,
}

impl Model {
    /// Builds and initializes a model; all trainable tensors derive from
    /// `seed`, the backbone from its own spec.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trainable = ParamSet::new();
        let encoder = EncoderParams::register(&mut trainable, config.encoder, config.dim, config.grid, &mut rng);
        let mut tok_cfg = config.tokenizer.clone();
        if config.ablations.no_hierarchical_attention {
            tok_cfg.intra_layers = 0;
            tok_cfg.inter_layers = 0;
        }
        let tokenizer = TokenizerParams::register(&mut trainable, tok_cfg, config.dim, &mut rng);
        let vocab = config.grid.vocabulary_size();
        let head_weight = ParamRef::Trainable(trainable.push("head.weight", init::scaled_normal(config.dim, vocab, &mut rng)));
        let head_bias = ParamRef::Trainable(trainable.push("head.bias", Tensor::zeros(&[vocab])));
        let mut frozen = ParamSet::new();
        let backbone = Backbone::build(&config.backbone, config.dim, &mut frozen)?;
        Ok(Self { config, trainable, frozen, encoder, tokenizer, backbone, head_weight, head_bias })
    }

    pub fn vocabulary_size(&self) -> usize {
        self.config.grid.vocabulary_size()
    }

    /// A fresh tape over this model's parameters (evaluation mode).
    pub fn tape(&self) -> Tape<'_> {
        Tape::with_params(&self.trainable, &self.frozen)
    }

    /// SHA-256 over the frozen tensors.
    pub fn backbone_checksum(&self) -> [u8; 32] {
        self.frozen.checksum()
    }

    /// Records the fused input sequence: `[N + H x D]` with segment tokens
    /// first, or `[T + H x D]` without tokenization.
    pub fn fused_sequence(
        &self,
        tape: &mut Tape<'_>,
        sample: &PredictionSample,
        semantics: &SampleSemantics,
    ) -> Result<Var, ModelError> {
        let d = self.config.dim;
        for t in [&semantics.history, &semantics.task] {
            if t.cols() != d {
                return Err(ModelError::DimMismatch { expected: d, found: t.cols() });
            }
        }
        let ab = self.config.ablations;
        let history = self.encoder.observation_rows(tape, &sample.history_times, &sample.history)?;
        let future = self.encoder.temporal_rows(tape, &sample.future_times)?;
        let history_tokens = if ab.no_tokenization {
            history
        } else {
            self.tokenizer.tokenize(tape, history)?
        };
        let te_history = if ab.no_traj_info {
            None
        } else if ab.no_tokenization {
            let mut rows = Vec::with_capacity(HISTORY_DAYS * SLOTS_PER_DAY * d);
            for day in 0..HISTORY_DAYS {
                for _ in 0..SLOTS_PER_DAY {
                    rows.extend_from_slice(semantics.history.row_slice(day));
                }
            }
            Some(Tensor::matrix(HISTORY_DAYS * SLOTS_PER_DAY, d, rows)?)
        } else {
            Some(semantics.history.clone())
        };
        let history_tokens = match te_history {
            Some(te) => {
                if te.rows() != tape.value(history_tokens).rows() {
                    return Err(ModelError::DimMismatch { expected: tape.value(history_tokens).rows(), found: te.rows() });
                }
                let te = tape.constant(te)?;
                tape.add(history_tokens, te)?
            }
            None => history_tokens,
        };
        let future = if ab.no_task_desc {
            future
        } else {
            let te = tape.constant(semantics.task.clone())?;
            tape.add_row(future, te)?
        };
        Ok(tape.concat_rows(&[history_tokens, future])?)
    }

    /// Logits over the location vocabulary for the 48 future slots.
    pub fn forward(&self, tape: &mut Tape<'_>, sample: &PredictionSample, semantics: &SampleSemantics) -> Result<Var, ModelError> {
        let fused = self.fused_sequence(tape, sample, semantics)?;
        let hidden = self.backbone.forward(tape, fused)?;
        let rows = tape.value(hidden).rows();
        let future = tape.slice_rows(hidden, rows - HORIZON, HORIZON)?;
        let w = tape.param(self.head_weight);
        let b = tape.param(self.head_bias);
        let logits = tape.matmul(future, w)?;
        Ok(tape.add_row(logits, b)?)
    }

    /// Mean cross-entropy over the sample's observed future slots.
    pub fn loss(&self, tape: &mut Tape<'_>, sample: &PredictionSample, semantics: &SampleSemantics) -> Result<Var, ModelError> {
        let logits = self.forward(tape, sample, semantics)?;
        let targets: Vec<Option<usize>> = sample.targets.iter().map(|t| t.map(|id| id as usize)).collect();
        Ok(tape.cross_entropy_masked(logits, &targets)?)
    }

    /// Evaluation-mode logits `[48 x V]`.
    pub fn logits(&self, sample: &PredictionSample, semantics: &SampleSemantics) -> Result<Tensor, ModelError> {
        let mut tape = self.tape();
        let out = self.forward(&mut tape, sample, semantics)?;
        Ok(tape.value(out).clone())
    }

    /// Loss of one sample and the gradients of every tensor in `params`,
    /// which must share the layout of `self.trainable`. A dropout generator
    /// switches the tape to training mode.
    pub fn loss_and_gradients(
        &self,
        params: &ParamSet,
        sample: &PredictionSample,
        semantics: &SampleSemantics,
        dropout: Option<ChaCha8Rng>,
    ) -> Result<(f64, Vec<Option<Tensor>>), ModelError> {
        let mut tape = Tape::with_params(params, &self.frozen);
        if let Some(rng) = dropout {
            tape.enable_dropout(rng);
        }
        let loss = self.loss(&mut tape, sample, semantics)?;
        let value = tape.value(loss).data()[0];
        Ok((value, tape.backward(loss)?.into_trainable()))
    }

    /// Trainable handles of every registered tensor, in set order.
    pub fn trainable_refs(&self) -> Vec<ParamRef> {
        (0..self.trainable.len()).map(ParamRef::Trainable).collect()
    }
}

/// `softmax(h W + b)` for one hidden vector with a `[D x V]` head.
pub fn predict_distribution(hidden: &[f64], weight: &Tensor, bias: &Tensor) -> Result<Vec<f64>, ModelError> {
    if weight.rows() != hidden.len() {
        return Err(ModelError::DimMismatch { expected: weight.rows(), found: hidden.len() });
    }
    if bias.len() != weight.cols() {
        return Err(ModelError::DimMismatch { expected: weight.cols(), found: bias.len() });
    }
    let h = Tensor::matrix(1, hidden.len(), hidden.to_vec())?;
    let mut logits = crate::numerics::matmul(&h, weight)?;
    logits.axpy(1.0, &bias.clone().reshape(vec![1, bias.len()])?);
    Ok(crate::numerics::softmax_rows(&logits)?.into_data())
}

/// Mean `-ln p[target]` over rows whose target is present.
pub fn sequence_loss(distributions: &Tensor, targets: &[Option<u32>]) -> Result<f64, ModelError> {
    if distributions.rows() != targets.len() {
        return Err(ModelError::DimMismatch { expected: distributions.rows(), found: targets.len() });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let p = *distributions.row_slice(r).get(*t as usize).ok_or(NumericsError::IndexOutOfRange {
                op: "sequence_loss",
                index: *t as usize,
                bound: distributions.cols(),
            })?;
            total -= p.ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(NumericsError::AllTargetsMissing.into());
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests;
