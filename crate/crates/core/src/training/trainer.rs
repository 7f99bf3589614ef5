use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{chronological_split, dataset_fingerprint, DaySplit, GridSpec, PredictionSample, Split, Trajectory};
use crate::exec::Execution;
use crate::metrics::{summarize, top_k_ranking, MetricSummary, RankedPrediction, SampleOutcome};
use crate::model::{Model, ModelError};
use crate::numerics::{ParamSet, Tensor};
use crate::semantic::{read_cache, sample_semantics, Embedder, EmbedderSpec, SampleSemantics, StubEmbedder};

use super::checkpoint::{hex, Checkpoint, CheckpointHeader};
use super::optim::{clip_global_norm, AdamW, AdamWConfig};
use super::{TrainConfig, TrainError};

/// Samples per unit of parallel work; partial sums are reduced in chunk
/// order so the result does not depend on scheduling.
pub const GRADIENT_CHUNK: usize = 8;

pub fn build_embedder(spec: &EmbedderSpec, dim: usize) -> Result<Box<dyn Embedder>, TrainError> {
    match spec {
        EmbedderSpec::Stub { seed } => Ok(Box::new(StubEmbedder::new(*seed, dim))),
        EmbedderSpec::Cache { path } => {
            let cache = read_cache(path)?;
            if cache.dim() != dim {
                return Err(ModelError::DimMismatch { expected: dim, found: cache.dim() }.into());
            }
            Ok(Box::new(cache))
        }
    }
}

/// Samples of one split with their prompt embeddings.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub split: Split,
    pub samples: Vec<PredictionSample>,
    pub semantics: Vec<SampleSemantics>,
}

impl PreparedSplit {
    pub fn new(split: Split, samples: Vec<PredictionSample>, grid: &GridSpec, embedder: &dyn Embedder) -> Result<Self, TrainError> {
        let semantics = samples.iter().map(|s| sample_semantics(s, grid, embedder)).collect::<Result<_, _>>()?;
        Ok(Self { split, samples, semantics })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub grid: GridSpec,
    pub days: DaySplit,
    pub train: PreparedSplit,
    pub val: PreparedSplit,
    pub test: PreparedSplit,
    pub fingerprint: String,
}

impl Dataset {
    /// Splits trajectories chronologically and embeds every sample's
    /// prompts with the configured embedder.
    pub fn prepare(trajectories: &[Trajectory], config: &TrainConfig) -> Result<Self, TrainError> {
        let embedder = build_embedder(&config.embedder, config.model.dim)?;
        Self::with_embedder(trajectories, config, embedder.as_ref())
    }

    pub fn with_embedder(trajectories: &[Trajectory], config: &TrainConfig, embedder: &dyn Embedder) -> Result<Self, TrainError> {
        let grid = config.model.grid;
        let (days, split) = chronological_split(trajectories, &grid, config.split_ratios)?;
        Ok(Self {
            grid,
            days,
            train: PreparedSplit::new(Split::Train, split.train, &grid, embedder)?,
            val: PreparedSplit::new(Split::Val, split.val, &grid, embedder)?,
            test: PreparedSplit::new(Split::Test, split.test, &grid, embedder)?,
            fingerprint: dataset_fingerprint(trajectories),
        })
    }

    pub fn get(&self, split: Split) -> &PreparedSplit {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Position in the schedule: the next batch to run is `batch` of `epoch`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub batch: usize,
    pub global_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_acc1: f64,
    pub val_mrr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Scores every sample of `split` with `params` (which must share the
/// layout of `model.trainable`).
pub fn evaluate(
    model: &Model,
    params: &ParamSet,
    split: &PreparedSplit,
    top_k: usize,
    execution: Execution,
) -> Result<MetricSummary, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit(split.split.name()));
    }
    let indices: Vec<usize> = (0..split.len()).collect();
    let outcomes = execution.map(&indices, |_, &i| -> Result<SampleOutcome, TrainError> {
        let s = &split.samples[i];
        let mut tape = crate::numerics::Tape::with_params(params, &model.frozen);
        let out = model.forward(&mut tape, s, &split.semantics[i])?;
        let logits = tape.value(out);
        let slots = (0..logits.rows())
            .map(|r| RankedPrediction {
                time: s.future_times[r],
                target: s.targets[r],
                ranking: top_k_ranking(logits.row_slice(r), top_k),
            })
            .collect();
        Ok(SampleOutcome { user_id: s.user_id, target_day: s.target_day, slots })
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(&outcomes, &model.config.grid, top_k)?)
}

/// Metrics for one split together with what produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub split: Split,
    pub predictor: String,
    pub checkpoint_epoch: Option<usize>,
    pub metrics: MetricSummary,
    pub config: TrainConfig,
    pub days: DaySplit,
    pub data_fingerprint: String,
}

fn sample_seed(seed: u64, step: u64, index: usize) -> u64 {
    // SplitMix64 finalizer over the combined key.
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mini-batch AdamW over the training split with per-epoch validation and
/// best-epoch retention.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub progress: Progress,
    pub val_history: Vec<EpochRecord>,
    pub best: Option<(usize, ParamSet)>,
    /// Per-step losses recorded by this instance.
    pub loss_trace: Vec<f64>,
    log: Option<Box<dyn Write>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(AdamWConfig::new(config.learning_rate, config.weight_decay), &model.trainable);
        let trainer = Self {
            config,
            model,
            optimizer,
            progress: Progress::default(),
            val_history: Vec::new(),
            best: None,
            loss_trace: Vec::new(),
            log: None,
        };
        trainer.audit()?;
        Ok(trainer)
    }

    /// Continues from a saved state; the rebuilt backbone must match the
    /// recorded checksum.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        let mut trainer = Self::new(ckpt.header.config.clone())?;
        let computed = hex(&trainer.model.backbone_checksum());
        if computed != ckpt.header.backbone_checksum {
            return Err(ModelError::ChecksumMismatch { recorded: ckpt.header.backbone_checksum, computed }.into());
        }
        install(&mut trainer.model.trainable, &ckpt.trainable)?;
        trainer.optimizer = trainer.optimizer.with_state(ckpt.header.adam_step, ckpt.adam_m, ckpt.adam_v)?;
        trainer.progress = ckpt.header.progress;
        trainer.val_history = ckpt.header.val_history;
        trainer.best = match (ckpt.header.best_epoch, ckpt.best) {
            (Some(epoch), Some(params)) => {
                let mut p = trainer.model.trainable.clone();
                install(&mut p, &params)?;
                Some((epoch, p))
            }
            (None, None) => None,
            _ => return Err(TrainError::Checkpoint("best epoch and best parameters disagree".into())),
        };
        Ok(trainer)
    }

    /// Streams JSON lines for every step and epoch to `sink`.
    pub fn with_log(mut self, sink: Box<dyn Write>) -> Self {
        self.log = Some(sink);
        self
    }

    fn audit(&self) -> Result<(), TrainError> {
        match self.optimizer.frozen_overlap(&self.model.frozen) {
            0 => Ok(()),
            n => Err(TrainError::FrozenInOptimizer(n)),
        }
    }

    fn emit(&mut self, record: &impl Serialize) -> Result<(), TrainError> {
        if let Some(sink) = self.log.as_mut() {
            serde_json::to_writer(&mut *sink, record)?;
            sink.write_all(b"\n").map_err(|source| TrainError::Io { path: "<log>".into(), source })?;
        }
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs
    }

    fn batches_per_epoch(&self, data: &Dataset) -> usize {
        data.train.len().div_ceil(self.config.batch_size)
    }

    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64)));
        order
    }

    /// Mean loss and gradient over `batch`.
    fn batch_gradient(&self, data: &Dataset, batch: &[usize]) -> Result<(f64, Vec<Tensor>), TrainError> {
        let (model, seed, epoch, step) = (&self.model, self.config.seed, self.progress.epoch, self.progress.global_step);
        let chunks: Vec<&[usize]> = batch.chunks(GRADIENT_CHUNK).collect();
        let partials = self.config.execution.map(&chunks, |_, chunk| -> Result<(f64, Vec<Tensor>), TrainError> {
            let mut loss = 0.0;
            let mut grads: Vec<Tensor> = model.trainable.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for &i in *chunk {
                let s = &data.train.samples[i];
                let rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, step, i));
                let (l, g) = model.loss_and_gradients(&model.trainable, s, &data.train.semantics[i], Some(rng))?;
                if !l.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, step, user_id: s.user_id, target_day: s.target_day });
                }
                loss += l;
                for (acc, g) in grads.iter_mut().zip(g) {
                    if let Some(g) = g {
                        acc.axpy(1.0, &g);
                    }
                }
            }
            Ok((loss, grads))
        });
        let mut total = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for part in partials {
            let (l, g) = part?;
            total += l;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| a.axpy(1.0, g)),
            }
        }
        let n = batch.len() as f64;
        let mut grads = grads.unwrap_or_default();
        grads.iter_mut().for_each(|g| g.scale_in_place(1.0 / n));
        Ok((total / n, grads))
    }

    /// Runs the next mini-batch, and validation when it closes an epoch.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord, TrainError> {
        if data.train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        let order = self.epoch_order(self.progress.epoch, data.train.len());
        let bs = self.config.batch_size;
        let start = self.progress.batch * bs;
        let batch = &order[start..(start + bs).min(order.len())];
        let (loss, mut grads) = self.batch_gradient(data, batch)?;
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        self.optimizer.update(&mut self.model.trainable, &grads)?;
        let record = StepRecord { epoch: self.progress.epoch, step: self.progress.global_step, loss, grad_norm };
        self.progress.global_step += 1;
        self.progress.batch += 1;
        self.loss_trace.push(loss);
        self.emit(&record)?;
        if self.progress.batch == self.batches_per_epoch(data) {
            self.finish_epoch(data)?;
        }
        Ok(record)
    }

    fn finish_epoch(&mut self, data: &Dataset) -> Result<(), TrainError> {
        let epoch = self.progress.epoch;
        let m = evaluate(&self.model, &self.model.trainable, &data.val, self.config.top_k, self.config.execution)?;
        let record = EpochRecord { epoch, val_acc1: m.acc1, val_mrr: m.mrr };
        let improved = self.val_history.iter().all(|r| m.acc1 > r.val_acc1);
        if improved {
            self.best = Some((epoch, self.model.trainable.clone()));
        }
        self.emit(&record)?;
        self.val_history.push(record);
        self.progress.epoch += 1;
        self.progress.batch = 0;
        Ok(())
    }

    /// Trains until the configured epochs are done or `max_steps` more
    /// steps have run; `on_epoch` sees the trainer after every epoch.
    pub fn run(
        &mut self,
        data: &Dataset,
        max_steps: Option<u64>,
        mut on_epoch: impl FnMut(&Trainer) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        let mut taken = 0u64;
        while !self.is_finished() && max_steps.is_none_or(|m| taken < m) {
            let epoch = self.progress.epoch;
            self.step(data)?;
            taken += 1;
            if self.progress.epoch != epoch {
                on_epoch(self)?;
            }
        }
        Ok(())
    }

    /// Parameters of the best validation epoch, or the current ones before
    /// any epoch has finished.
    pub fn best_params(&self) -> &ParamSet {
        self.best.as_ref().map_or(&self.model.trainable, |(_, p)| p)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|(e, _)| *e)
    }

    pub fn checkpoint(&self, data_fingerprint: &str) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                config: self.config.clone(),
                progress: self.progress,
                adam_step: self.optimizer.step,
                val_history: self.val_history.clone(),
                best_epoch: self.best_epoch(),
                backbone: self.model.backbone.meta,
                backbone_checksum: hex(&self.model.backbone_checksum()),
                data_fingerprint: data_fingerprint.to_owned(),
            },
            trainable: self.model.trainable.clone(),
            adam_m: self.optimizer.m.clone(),
            adam_v: self.optimizer.v.clone(),
            frozen: self.model.frozen.clone(),
            best: self.best.as_ref().map(|(_, p)| p.clone()),
        }
    }

    /// Metrics of the best-validation parameters on `split`.
    pub fn report(&self, data: &Dataset, split: Split) -> Result<PredictionReport, TrainError> {
        let metrics = evaluate(&self.model, self.best_params(), data.get(split), self.config.top_k, self.config.execution)?;
        Ok(PredictionReport {
            split,
            predictor: "model".into(),
            checkpoint_epoch: self.best_epoch(),
            metrics,
            config: self.config.clone(),
            days: data.days,
            data_fingerprint: data.fingerprint.clone(),
        })
    }
}

/// Copies `source` into `target` after checking names and shapes agree.
fn install(target: &mut ParamSet, source: &ParamSet) -> Result<(), TrainError> {
    if target.names() != source.names() {
        return Err(TrainError::Checkpoint("parameter names differ from the configured model".into()));
    }
    for (i, t) in source.tensors().iter().enumerate() {
        if target.get(i).shape() != t.shape() {
            return Err(TrainError::Checkpoint(format!("{} has shape {:?}, expected {:?}", source.name(i), t.shape(), target.get(i).shape())));
        }
        *target.get_mut(i) = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests;
