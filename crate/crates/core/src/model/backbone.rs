use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{AttnLayout, ParamRef, ParamSet, Tape, Var};
use crate::tokenizer::{gated_block, BlockParams};

use super::ModelError;

pub const STAGE_BACKBONE: &str = "backbone";

const BLOCK_FIELDS: [&str; 11] = [
    "norm1_gain",
    "norm1_bias",
    "query",
    "key",
    "value",
    "output",
    "norm2_gain",
    "norm2_bias",
    "gate",
    "ffn_in",
    "ffn_out",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackboneSpec {
    /// Gated blocks drawn from `seed` and never updated.
    FrozenRandom { layers: usize, heads: usize, seed: u64 },
    /// Passes the fused sequence through unchanged.
    Identity,
    /// Frozen tensors read from a checkpoint file.
    Load { path: PathBuf },
}

impl FromStr for BackboneSpec {
    type Err = ModelError;

    /// `identity`, `frozen-random:L:H[:SEED]` or `load:PATH`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::BadBackbone(format!("{s:?} (expected identity, frozen-random:L:H[:SEED] or load:PATH)"));
        if s == "identity" {
            return Ok(BackboneSpec::Identity);
        }
        if let Some(path) = s.strip_prefix("load:") {
            return if path.is_empty() { Err(bad()) } else { Ok(BackboneSpec::Load { path: path.into() }) };
        }
        let rest = s.strip_prefix("frozen-random:").ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split(':').collect();
        let num = |p: &str| p.parse::<u64>().map_err(|_| bad());
        match parts.as_slice() {
            [l, h] => Ok(BackboneSpec::FrozenRandom { layers: num(l)? as usize, heads: num(h)? as usize, seed: 0 }),
            [l, h, seed] => {
                Ok(BackboneSpec::FrozenRandom { layers: num(l)? as usize, heads: num(h)? as usize, seed: num(seed)? })
            }
            _ => Err(bad()),
        }
    }
}

/// Shape of a stored backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub meta: BackboneMeta,
    pub blocks: Vec<BlockParams>,
}

fn block_refs(frozen: &ParamSet, layer: usize) -> Result<BlockParams, ModelError> {
    let mut refs = Vec::with_capacity(BLOCK_FIELDS.len());
    for field in BLOCK_FIELDS {
        let name = format!("backbone.layer{layer}.{field}");
        let idx = frozen.index_of(&name).ok_or_else(|| ModelError::BadBackbone(format!("missing tensor {name}")))?;
        refs.push(ParamRef::Frozen(idx));
    }
    Ok(BlockParams {
        norm1_gain: refs[0],
        norm1_bias: refs[1],
        query: refs[2],
        key: refs[3],
        value: refs[4],
        output: refs[5],
        norm2_gain: refs[6],
        norm2_bias: refs[7],
        gate: refs[8],
        ffn_in: refs[9],
        ffn_out: refs[10],
    })
}

fn check_shapes(frozen: &ParamSet, block: &BlockParams, dim: usize) -> Result<(), ModelError> {
    let expect: [&[usize]; 11] = [
        &[dim],
        &[dim],
        &[dim, dim],
        &[dim, dim],
        &[dim, dim],
        &[dim, dim],
        &[dim],
        &[dim],
        &[dim, dim],
        &[dim, 4 * dim],
        &[4 * dim, dim],
    ];
    for (r, shape) in block.refs().iter().zip(expect) {
        let ParamRef::Frozen(i) = r else { unreachable!("backbone refs are frozen") };
        if frozen.get(*i).shape() != shape {
            return Err(ModelError::BadBackbone(format!(
                "{} has shape {:?}, expected {shape:?}",
                frozen.name(*i),
                frozen.get(*i).shape()
            )));
        }
    }
    Ok(())
}

impl Backbone {
    /// Materializes the backbone's tensors into `frozen`.
    pub fn build(spec: &BackboneSpec, dim: usize, frozen: &mut ParamSet) -> Result<Self, ModelError> {
        match spec {
            BackboneSpec::Identity => {
                Ok(Self { spec: spec.clone(), meta: BackboneMeta { layers: 0, heads: 1, dim }, blocks: Vec::new() })
            }
            BackboneSpec::FrozenRandom { layers, heads, seed } => {
                if *heads == 0 || dim % heads != 0 {
                    return Err(ModelError::BadBackbone(format!("{heads} heads do not divide dim {dim}")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let blocks = (0..*layers)
                    .map(|l| BlockParams::register(frozen, &format!("backbone.layer{l}"), dim, true, &mut rng))
                    .collect();
                Ok(Self { spec: spec.clone(), meta: BackboneMeta { layers: *layers, heads: *heads, dim }, blocks })
            }
            BackboneSpec::Load { path } => {
                let (meta, tensors) = crate::training::read_backbone(path).map_err(|e| ModelError::Load {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                if meta.dim != dim {
                    return Err(ModelError::DimMismatch { expected: dim, found: meta.dim });
                }
                if meta.heads == 0 || dim % meta.heads != 0 {
                    return Err(ModelError::BadBackbone(format!("{} heads do not divide dim {dim}", meta.heads)));
                }
                for (name, t) in tensors.iter() {
                    frozen.push(name, t.clone());
                }
                let blocks = (0..meta.layers).map(|l| block_refs(frozen, l)).collect::<Result<Vec<_>, _>>()?;
                for b in &blocks {
                    check_shapes(frozen, b, dim)?;
                }
                Ok(Self { spec: spec.clone(), meta, blocks })
            }
        }
    }

    /// Full (non-causal) attention stack; no dropout.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, ModelError> {
        let n = tape.value(x).rows();
        let layout = AttnLayout { heads: self.meta.heads, q_block: n, kv_block: n };
        let mut h = x;
        for block in &self.blocks {
            h = gated_block(tape, h, block, layout, 0.0, Some(STAGE_BACKBONE))?;
        }
        Ok(h)
    }
}
