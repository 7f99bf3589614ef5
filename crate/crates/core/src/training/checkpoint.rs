use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::BackboneMeta;
use crate::numerics::{ParamSet, Tensor};

use super::trainer::{EpochRecord, Progress};
use super::{TrainConfig, TrainError};

const MAGIC: &[u8; 4] = b"RHYK";
pub const CHECKPOINT_VERSION: u16 = 1;

const GROUP_PARAM: &str = "param";
const GROUP_ADAM_M: &str = "adam_m";
const GROUP_ADAM_V: &str = "adam_v";
const GROUP_FROZEN: &str = "frozen";
const GROUP_BEST: &str = "best";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Section {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub progress: Progress,
    pub adam_step: u64,
    pub val_history: Vec<EpochRecord>,
    /// Epoch whose parameters are stored in the `best` section.
    pub best_epoch: Option<usize>,
    pub backbone: BackboneMeta,
    pub backbone_checksum: String,
    pub data_fingerprint: String,
}

/// A complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub trainable: ParamSet,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub frozen: ParamSet,
    pub best: Option<ParamSet>,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    header: CheckpointHeader,
    sections: Vec<Section>,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// The parameters to evaluate: best-validation ones when recorded.
    pub fn eval_params(&self) -> &ParamSet {
        self.best.as_ref().unwrap_or(&self.trainable)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut sections = Vec::new();
        let mut add = |group: &str, name: &str, t: &Tensor| {
            sections.push(Section { group: group.into(), name: name.into(), shape: t.shape().to_vec() });
        };
        let names = self.trainable.names();
        for (name, t) in self.trainable.iter() {
            add(GROUP_PARAM, name, t);
        }
        for (name, t) in names.iter().zip(&self.adam_m) {
            add(GROUP_ADAM_M, name, t);
        }
        for (name, t) in names.iter().zip(&self.adam_v) {
            add(GROUP_ADAM_V, name, t);
        }
        for (name, t) in self.frozen.iter() {
            add(GROUP_FROZEN, name, t);
        }
        for (name, t) in self.best.iter().flat_map(|b| b.iter()) {
            add(GROUP_BEST, name, t);
        }
        let ordered: Vec<&Tensor> = self
            .trainable
            .tensors()
            .iter()
            .chain(&self.adam_m)
            .chain(&self.adam_v)
            .chain(self.frozen.tensors())
            .chain(self.best.iter().flat_map(|b| b.tensors()))
            .collect();
        let envelope = serde_json::to_vec(&Envelope { header: self.header.clone(), sections })?;
        let mut out = Vec::with_capacity(envelope.len() + ordered.iter().map(|t| t.len() * 8).sum::<usize>() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(envelope.len() as u64).to_le_bytes());
        out.extend_from_slice(&envelope);
        for t in ordered {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_owned());
        if bytes.len() < 14 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("missing RHYK magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("content digest mismatch"));
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(body[6..14].try_into().expect("8 bytes")) as usize;
        let header_end = 14usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
        let envelope: Envelope = serde_json::from_slice(&body[14..header_end])?;
        let mut cursor = header_end;
        let mut ckpt = Checkpoint {
            header: envelope.header,
            trainable: ParamSet::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            frozen: ParamSet::new(),
            best: None,
        };
        for s in envelope.sections {
            let n: usize = s.shape.iter().product();
            let end = cursor.checked_add(n * 8).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated tensor data"))?;
            let data = body[cursor..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            cursor = end;
            let t = Tensor::new(s.shape, data)?;
            match s.group.as_str() {
                GROUP_PARAM => {
                    ckpt.trainable.push(s.name, t);
                }
                GROUP_ADAM_M => ckpt.adam_m.push(t),
                GROUP_ADAM_V => ckpt.adam_v.push(t),
                GROUP_FROZEN => {
                    ckpt.frozen.push(s.name, t);
                }
                GROUP_BEST => {
                    ckpt.best.get_or_insert_with(ParamSet::new).push(s.name, t);
                }
                other => return Err(TrainError::Checkpoint(format!("unknown section group {other:?}"))),
            }
        }
        if cursor != body.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if ckpt.adam_m.len() != ckpt.trainable.len() || ckpt.adam_v.len() != ckpt.trainable.len() {
            return Err(bad("optimizer moments do not cover the trainable tensors"));
        }
        if hex(&ckpt.frozen.checksum()) != ckpt.header.backbone_checksum {
            return Err(bad("stored backbone tensors do not match the recorded checksum"));
        }
        Ok(ckpt)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.to_owned(), source })?;
    }
    fs::write(path, ckpt.to_bytes()?).map_err(|source| TrainError::Io { path: path.to_owned(), source })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path).map_err(|source| TrainError::Io { path: path.to_owned(), source })?;
    Checkpoint::from_bytes(&bytes)
}

/// The frozen backbone stored in a checkpoint.
pub fn read_backbone(path: &Path) -> Result<(BackboneMeta, ParamSet), TrainError> {
    let ckpt = read_checkpoint(path)?;
    Ok((ckpt.header.backbone, ckpt.frozen))
}
