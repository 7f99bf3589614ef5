use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{day_of_week, GridSpec, PredictionSample, Trajectory, HISTORY_DAYS, SLOTS_PER_DAY};
use crate::exec::Execution;
use crate::numerics::Tensor;

use super::{render_history_prompt, render_task_prompt, DayRecord, Digest, Embedder, Prompt, SemanticError};

pub const CACHE_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"RHYC";
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

/// Digest-keyed embeddings. Lookups never invoke a producer.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    entries: BTreeMap<Digest, Vec<f32>>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, digest: Digest, vector: Vec<f32>) -> Result<(), SemanticError> {
        if vector.len() != self.dim {
            return Err(SemanticError::DimMismatch { expected: self.dim, found: vector.len() });
        }
        self.entries.insert(digest, vector);
        Ok(())
    }

    pub fn get(&self, digest: &Digest) -> Option<&[f32]> {
        self.entries.get(digest).map(Vec::as_slice)
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.entries.contains_key(digest)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.entries.len() * (32 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (digest, v) in &self.entries {
            out.extend_from_slice(&digest.0);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SemanticError> {
        let bad = |m: &str| SemanticError::BadCache(m.to_owned());
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(bad("missing RHYC header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CACHE_VERSION {
            return Err(SemanticError::BadCache(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
        let entry = 32 + 4 * dim;
        if dim == 0 || bytes.len() != HEADER_LEN + count * entry {
            return Err(bad("length does not match header"));
        }
        let mut cache = Self::new(dim);
        for chunk in bytes[HEADER_LEN..].chunks_exact(entry) {
            let digest = Digest(chunk[..32].try_into().expect("32 bytes"));
            let v: Vec<f32> = chunk[32..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite value"));
            }
            if cache.entries.insert(digest, v).is_some() {
                return Err(bad("duplicate digest"));
            }
        }
        Ok(cache)
    }
}

impl Embedder for EmbeddingCache {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &Prompt) -> Result<Vec<f32>, SemanticError> {
        let d = prompt.digest();
        self.get(&d).map(<[f32]>::to_vec).ok_or(SemanticError::CacheMiss(d))
    }
}

pub fn write_cache(path: &Path, cache: &EmbeddingCache) -> Result<(), SemanticError> {
    fs::write(path, cache.to_bytes()).map_err(|source| SemanticError::Io { path: path.to_owned(), source })
}

pub fn read_cache(path: &Path) -> Result<EmbeddingCache, SemanticError> {
    let bytes = fs::read(path).map_err(|source| SemanticError::Io { path: path.to_owned(), source })?;
    EmbeddingCache::from_bytes(&bytes)
}

fn history_prompt(user_id: u64, day: u32, records: &[DayRecord]) -> Prompt {
    render_history_prompt(user_id, day, day_of_week(day), records)
}

/// Every prompt a dataset can request: one per (user, observed-span day)
/// and one task prompt per eligible target day.
pub fn dataset_prompts(trajectories: &[Trajectory], grid: &GridSpec) -> Vec<Prompt> {
    let mut out = Vec::new();
    for t in trajectories {
        for day in 0..t.num_days() {
            let records: Vec<DayRecord> = t.day(day).iter().map(|o| DayRecord { slot: o.slot, cell: (o.x, o.y) }).collect();
            out.push(history_prompt(t.user_id, day, &records));
        }
        for day in HISTORY_DAYS as u32..t.num_days() {
            out.push(render_task_prompt(t.user_id, day, day_of_week(day), grid));
        }
    }
    out
}

/// Embeds every prompt of the dataset once (deduplicated by digest).
pub fn precompute_cache(
    trajectories: &[Trajectory],
    grid: &GridSpec,
    embedder: &dyn Embedder,
    exec: Execution,
) -> Result<EmbeddingCache, SemanticError> {
    let mut unique: BTreeMap<Digest, Prompt> = BTreeMap::new();
    for p in dataset_prompts(trajectories, grid) {
        unique.entry(p.digest()).or_insert(p);
    }
    let prompts: Vec<(Digest, Prompt)> = unique.into_iter().collect();
    let vectors = exec.map(&prompts, |_, (_, p)| embedder.embed(p));
    let mut cache = EmbeddingCache::new(embedder.dim());
    for ((digest, _), v) in prompts.iter().zip(vectors) {
        cache.insert(*digest, v?)?;
    }
    Ok(cache)
}

/// Writes each prompt to `<dir>/<digest>.txt`.
pub fn dump_prompts(dir: &Path, prompts: &[Prompt]) -> Result<usize, SemanticError> {
    fs::create_dir_all(dir).map_err(|source| SemanticError::Io { path: dir.to_owned(), source })?;
    for p in prompts {
        let path = dir.join(format!("{}.txt", p.digest()));
        fs::write(&path, &p.text).map_err(|source| SemanticError::Io { path, source })?;
    }
    Ok(prompts.len())
}

/// Prompt embeddings attached to one sample: one row per history day and
/// the task row.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSemantics {
    pub history: Tensor,
    pub task: Tensor,
}

pub fn sample_semantics(
    sample: &PredictionSample,
    grid: &GridSpec,
    embedder: &dyn Embedder,
) -> Result<SampleSemantics, SemanticError> {
    let dim = embedder.dim();
    let mut history = Vec::with_capacity(HISTORY_DAYS * dim);
    for (i, day_slots) in sample.history.chunks(SLOTS_PER_DAY).enumerate() {
        let mut records = Vec::new();
        for (slot, loc) in day_slots.iter().enumerate() {
            if let Some(id) = loc {
                records.push(DayRecord { slot: slot as u32, cell: grid.inverse_location_id(*id)? });
            }
        }
        let day = sample.history_start() + i as u32;
        let v = embedder.embed(&history_prompt(sample.user_id, day, &records))?;
        history.extend(v.iter().map(|&x| f64::from(x)));
    }
    let task = embedder.embed(&render_task_prompt(sample.user_id, sample.target_day, day_of_week(sample.target_day), grid))?;
    Ok(SampleSemantics {
        history: Tensor::from_parts(vec![HISTORY_DAYS, dim], history),
        task: Tensor::from_parts(vec![1, dim], task.iter().map(|&x| f64::from(x)).collect()),
    })
}
