use std::io;
use std::sync::{Arc, Mutex};

use super::*;
use crate::data::{generate_synthetic, SyntheticConfig};
use crate::encoder::EncoderDims;
use crate::model::{BackboneSpec, ModelConfig};
use crate::semantic::{EmbeddingCache, SemanticError};
use crate::tokenizer::TokenizerConfig;
use crate::training::{read_backbone, write_checkpoint};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 2,
        seed: 5,
        learning_rate: 5e-4,
        model: ModelConfig {
            dim: 16,
            encoder: EncoderDims { time_of_day: 8, day_of_week: 8, location: 8, coord: 4 },
            tokenizer: TokenizerConfig { intra_layers: 1, inter_layers: 1, heads: 2, ..TokenizerConfig::default() },
            grid: GridSpec::new(10, 10).unwrap(),
            backbone: BackboneSpec::FrozenRandom { layers: 1, heads: 2, seed: 3 },
            ablations: Default::default(),
        },
        ..TrainConfig::default()
    }
}

fn tiny_data(config: &TrainConfig) -> Dataset {
    let cfg = SyntheticConfig { grid: config.model.grid, ..SyntheticConfig::new(3, 14, 0.1, 2) };
    Dataset::prepare(&generate_synthetic(&cfg).unwrap().trajectories, config).unwrap()
}

#[derive(Clone, Default)]
struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl io::Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn trained(config: TrainConfig, data: &Dataset) -> Trainer {
    let mut t = Trainer::new(config).unwrap();
    t.run(data, None, |_| Ok(())).unwrap();
    t
}

#[test]
fn split_sizes() {
    let data = tiny_data(&tiny_config());
    assert_eq!((data.train.len(), data.val.len(), data.test.len()), (6, 6, 9));
    assert_eq!(data.train.semantics[0].history.shape(), &[7, 16]);
}

#[test]
fn identical_seeds_give_identical_loss_traces() {
    let config = tiny_config();
    let data = tiny_data(&config);
    let a = trained(config.clone(), &data);
    let b = trained(config, &data);
    assert_eq!(a.loss_trace.len(), 4);
    assert_eq!(
        a.loss_trace.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
        b.loss_trace.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.model.trainable, b.model.trainable);
}

#[test]
fn sequential_and_parallel_execution_agree() {
    let config = TrainConfig { batch_size: 6, ..tiny_config() };
    let data = tiny_data(&config);
    let seq = trained(TrainConfig { execution: Execution::Sequential, ..config.clone() }, &data);
    let par = trained(TrainConfig { execution: Execution::Parallel, ..config }, &data);
    assert_eq!(seq.loss_trace, par.loss_trace);
    assert_eq!(seq.model.trainable, par.model.trainable);
}

#[test]
fn resume_continues_bit_identically() {
    let config = TrainConfig { epochs: 3, ..tiny_config() };
    let data = tiny_data(&config);
    let full = trained(config.clone(), &data);

    let mut first = Trainer::new(config).unwrap();
    first.run(&data, Some(3), |_| Ok(())).unwrap();
    assert_eq!(first.progress, Progress { epoch: 1, batch: 1, global_step: 3 });
    let bytes = first.checkpoint(&data.fingerprint).to_bytes().unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    resumed.run(&data, None, |_| Ok(())).unwrap();

    let joined: Vec<u64> = first.loss_trace.iter().chain(&resumed.loss_trace).map(|l| l.to_bits()).collect();
    assert_eq!(joined, full.loss_trace.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
    assert_eq!(resumed.model.trainable, full.model.trainable);
    assert_eq!(resumed.val_history, full.val_history);
    assert_eq!(resumed.best_epoch(), full.best_epoch());
}

#[test]
fn checkpoint_reload_reproduces_reports() {
    let config = tiny_config();
    let data = tiny_data(&config);
    let trainer = trained(config, &data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run/ckpt.rhyk");
    write_checkpoint(&path, &trainer.checkpoint(&data.fingerprint)).unwrap();
    let restored = Trainer::from_checkpoint(crate::training::read_checkpoint(&path).unwrap()).unwrap();
    for split in [Split::Val, Split::Test] {
        let a = serde_json::to_string(&trainer.report(&data, split).unwrap()).unwrap();
        let b = serde_json::to_string(&restored.report(&data, split).unwrap()).unwrap();
        assert_eq!(a, b);
    }
    let report = trainer.report(&data, Split::Test).unwrap();
    let back: PredictionReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn best_epoch_has_maximal_validation_accuracy() {
    let config = TrainConfig { epochs: 4, ..tiny_config() };
    let data = tiny_data(&config);
    let trainer = trained(config, &data);
    let best = trainer.best_epoch().unwrap();
    let max = trainer.val_history.iter().map(|r| r.val_acc1).fold(f64::MIN, f64::max);
    assert_eq!(trainer.val_history[best].val_acc1, max);
    assert!(trainer.val_history[..best].iter().all(|r| r.val_acc1 < max));
    let m = evaluate(&trainer.model, trainer.best_params(), &data.val, 10, Execution::Sequential).unwrap();
    assert_eq!(m.acc1, max);
}

#[test]
fn backbone_is_untouched_by_training() {
    let config = tiny_config();
    let data = tiny_data(&config);
    let mut trainer = Trainer::new(config).unwrap();
    let before = trainer.model.backbone_checksum();
    let frozen_before = trainer.model.frozen.clone();
    trainer.run(&data, None, |_| Ok(())).unwrap();
    assert_eq!(trainer.model.backbone_checksum(), before);
    assert_eq!(trainer.model.frozen, frozen_before);
    assert_eq!(trainer.optimizer.frozen_overlap(&trainer.model.frozen), 0);
    assert_eq!(trainer.optimizer.registered(), trainer.model.trainable.names());
}

#[test]
fn log_has_one_line_per_step_and_epoch() {
    let config = tiny_config();
    let data = tiny_data(&config);
    let buf = SharedBuf::default();
    let mut trainer = Trainer::new(config).unwrap().with_log(Box::new(buf.clone()));
    trainer.run(&data, None, |_| Ok(())).unwrap();
    let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4 + 2);
    assert_eq!(lines.iter().filter(|v| v.get("loss").is_some()).count(), 4);
    assert_eq!(lines.iter().filter(|v| v.get("val_acc1").is_some()).count(), 2);
}

#[test]
fn tampered_checkpoints_are_rejected() {
    let config = tiny_config();
    let data = tiny_data(&config);
    let trainer = Trainer::new(config).unwrap();
    let ckpt = trainer.checkpoint(&data.fingerprint);
    let mut bytes = ckpt.to_bytes().unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(TrainError::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(TrainError::Checkpoint(_))));

    let mut other = ckpt.clone();
    other.header.config.model.backbone = BackboneSpec::FrozenRandom { layers: 1, heads: 2, seed: 4 };
    let err = Trainer::from_checkpoint(other).err().unwrap();
    assert!(matches!(err, TrainError::Model(ModelError::ChecksumMismatch { .. })));
}

#[test]
fn checkpoint_backbone_can_be_loaded() {
    let config = tiny_config();
    let data = tiny_data(&config);
    let trainer = Trainer::new(config.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("source.rhyk");
    write_checkpoint(&path, &trainer.checkpoint(&data.fingerprint)).unwrap();
    let (meta, frozen) = read_backbone(&path).unwrap();
    assert_eq!((meta.layers, meta.heads, meta.dim), (1, 2, 16));
    assert_eq!(frozen, trainer.model.frozen);
    let loaded_cfg = ModelConfig { backbone: BackboneSpec::Load { path: path.clone() }, ..config.model.clone() };
    let loaded = Model::new(loaded_cfg, 9).unwrap();
    assert_eq!(loaded.backbone_checksum(), trainer.model.backbone_checksum());
    let wrong_dim = ModelConfig { dim: 32, backbone: BackboneSpec::Load { path }, ..config.model };
    assert!(matches!(Model::new(wrong_dim, 9), Err(ModelError::DimMismatch { .. })));
}

#[test]
fn evaluation_errors() {
    let config = tiny_config();
    let data = tiny_data(&config);
    let model = Model::new(config.model.clone(), 0).unwrap();
    let empty = PreparedSplit { split: Split::Val, samples: Vec::new(), semantics: Vec::new() };
    assert!(matches!(evaluate(&model, &model.trainable, &empty, 10, Execution::Sequential), Err(TrainError::EmptySplit("val"))));
    let gen = generate_synthetic(&SyntheticConfig { grid: config.model.grid, ..SyntheticConfig::new(1, 10, 0.0, 0) }).unwrap();
    let err = Dataset::with_embedder(&gen.trajectories, &config, &EmbeddingCache::new(16)).unwrap_err();
    assert!(matches!(err, TrainError::Semantic(SemanticError::CacheMiss(_))));
    let _ = data;
}
