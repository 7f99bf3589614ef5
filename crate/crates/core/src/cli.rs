//! Command-line surface: argument parsing and subcommand dispatch.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::data::{
    chronological_split, dataset_fingerprint, generate_synthetic, parse_trajectory_csv, write_synthetic, DaySplit,
    GridSpec, Split, SyntheticConfig, Trajectory,
};
use crate::exec::Execution;
use crate::metrics::{summarize, FrequencyBaseline, MetricSummary, MetricsError};
use crate::model::{end_to_end_gradcheck, BackboneSpec, GradcheckSetup, ModelError};
use crate::semantic::{dataset_prompts, dump_prompts, precompute_cache, write_cache, EmbedderSpec, SemanticError};
use crate::training::{build_embedder, read_checkpoint, Dataset, TrainConfig, TrainError, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Relative error above which `gradcheck` fails.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: max relative error {max_rel_err:e} in {tensor} exceeds {GRADCHECK_TOLERANCE:e}")]
    GradcheckFailed { max_rel_err: f64, tensor: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hiermob", version, about = "Next-day mobility prediction with hierarchical temporal tokenization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic routine dataset (CSV plus routine sidecar).
    Generate(GenerateArgs),
    /// Render every prompt of a dataset and precompute its embedding cache.
    Prompts(PromptsArgs),
    /// Train a model and write checkpoint, step log and resolved config.
    Train(TrainArgs),
    /// Score a checkpoint on one split and write a JSON report.
    Eval(EvalArgs),
    /// Score the per-user, per-slot frequency baseline on one split.
    Baseline(BaselineArgs),
    /// Finite-difference check of every trainable gradient.
    Gradcheck(GradcheckArgs),
    /// Summarize a checkpoint: training curve, best epoch and provenance.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Number of users.
    #[arg(long, default_value_t = 20)]
    pub users: u32,
    /// Number of days per user.
    #[arg(long, default_value_t = 30)]
    pub days: u32,
    /// Probability that a slot deviates from the routine.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Probability that a slot is left unobserved.
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid size as WxH.
    #[arg(long, default_value = "20x20")]
    pub grid: GridSpec,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    /// Trajectory CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Grid size as WxH.
    #[arg(long, default_value = "20x20")]
    pub grid: GridSpec,
    /// Embedder producing the vectors: stub[:SEED] or cache:PATH.
    #[arg(long, default_value = "stub")]
    pub embedder: EmbedderSpec,
    /// Embedding dimension.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Seed for the stub embedder (overrides the one in --embedder).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Embedding cache file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every prompt as `<digest>.txt` into this directory.
    #[arg(long)]
    pub dump_prompts: Option<PathBuf>,
}

/// Options that override fields of the training configuration.
#[derive(Debug, Args)]
pub struct ModelOverrides {
    /// JSON training configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid size as WxH.
    #[arg(long)]
    pub grid: Option<GridSpec>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// AdamW learning rate (1e-4, 3e-4 or 5e-4).
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Decoupled weight decay (0, 0.001 or 0.01).
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Samples per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Model width.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Embedder: stub[:SEED] or cache:PATH.
    #[arg(long)]
    pub embedder: Option<EmbedderSpec>,
    /// Backbone: identity, frozen-random:L:H[:SEED] or load:PATH.
    #[arg(long)]
    pub backbone: Option<BackboneSpec>,
    /// Remove the intra- and inter-segment attention stacks.
    #[arg(long)]
    pub no_ha: bool,
    /// Feed raw slot embeddings instead of segment tokens.
    #[arg(long)]
    pub no_token: bool,
    /// Drop the history prompt embeddings.
    #[arg(long)]
    pub no_traj_info: bool,
    /// Drop the task prompt embedding.
    #[arg(long)]
    pub no_task_desc: bool,
    /// Run per-sample work on a single thread.
    #[arg(long)]
    pub sequential: bool,
}

impl ModelOverrides {
    pub fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => TrainConfig::from_json_file(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(grid) = self.grid {
            c.model.grid = grid;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.dim {
            c.model.dim = v;
        }
        if let Some(v) = &self.embedder {
            c.embedder = v.clone();
        }
        if let Some(v) = &self.backbone {
            c.model.backbone = v.clone();
        }
        let a = &mut c.model.ablations;
        a.no_hierarchical_attention |= self.no_ha;
        a.no_tokenization |= self.no_token;
        a.no_traj_info |= self.no_traj_info;
        a.no_task_desc |= self.no_task_desc;
        if self.sequential {
            c.execution = Execution::Sequential;
        }
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Trajectory CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory (checkpoint.rhyk, train.jsonl, config.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ModelOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Trajectory CSV the checkpoint was trained on.
    #[arg(long)]
    pub data: PathBuf,
    /// Split to score: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Trajectory CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Grid size as WxH.
    #[arg(long, default_value = "20x20")]
    pub grid: GridSpec,
    /// Split to score: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Ranking length kept per slot.
    #[arg(long, default_value_t = crate::metrics::DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Output file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model width.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Grid size as WxH.
    #[arg(long, default_value = "10x10")]
    pub grid: GridSpec,
    /// Number of users.
    /// Number of synthetic users.
    #[arg(long, default_value_t = 2)]
    pub users: u32,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates probed per trainable tensor.
    #[arg(long, default_value_t = 6)]
    pub coords: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Metrics of a non-learned predictor.
#[derive(Debug, Serialize)]
pub struct BaselineReport {
    pub split: Split,
    pub predictor: &'static str,
    pub metrics: MetricSummary,
    pub days: DaySplit,
    pub data_fingerprint: String,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Prompts(a) => prompts(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Baseline(a) => baseline(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
    }
}

fn log_resolved<T: Serialize>(what: &str, value: &T) -> Result<(), CliError> {
    eprintln!("{what}: {}", serde_json::to_string(value)?);
    Ok(())
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_owned(), source })?;
            }
            fs::write(path, text + "\n").map_err(|source| CliError::Io { path: path.to_owned(), source })
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load(data: &Path, grid: &GridSpec) -> Result<Vec<Trajectory>, CliError> {
    Ok(parse_trajectory_csv(data, grid)?)
}

fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let config = SyntheticConfig { dropout: a.dropout, grid: a.grid, ..SyntheticConfig::new(a.users, a.days, a.noise, a.seed) };
    log_resolved("generate config", &config)?;
    let dataset = generate_synthetic(&config)?;
    write_synthetic(&a.out, &dataset)?;
    eprintln!("wrote {} users to {}", dataset.trajectories.len(), a.out.display());
    Ok(())
}

fn prompts(a: PromptsArgs) -> Result<(), CliError> {
    let spec = match (a.embedder, a.seed) {
        (EmbedderSpec::Stub { .. }, Some(seed)) => EmbedderSpec::Stub { seed },
        (spec, _) => spec,
    };
    log_resolved("prompts embedder", &spec)?;
    let trajectories = load(&a.data, &a.grid)?;
    if let Some(dir) = &a.dump_prompts {
        let n = dump_prompts(dir, &dataset_prompts(&trajectories, &a.grid))?;
        eprintln!("wrote {n} prompts to {}", dir.display());
    }
    let embedder = build_embedder(&spec, a.dim)?;
    let cache = precompute_cache(&trajectories, &a.grid, embedder.as_ref(), Execution::Parallel)?;
    write_cache(&a.out, &cache)?;
    eprintln!("cached {} embeddings in {}", cache.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut trainer = match &a.checkpoint {
        Some(path) => Trainer::from_checkpoint(read_checkpoint(path)?)?,
        None => Trainer::new(a.overrides.resolve()?)?,
    };
    let config = trainer.config.clone();
    log_resolved("train config", &config)?;
    eprintln!("seed: {}", config.seed);
    let trajectories = load(&a.data, &config.model.grid)?;
    let data = Dataset::prepare(&trajectories, &config)?;
    fs::create_dir_all(&a.out).map_err(|source| CliError::Io { path: a.out.clone(), source })?;
    write_json(Some(&a.out.join("config.json")), &config)?;
    let log_path = a.out.join("train.jsonl");
    let log = fs::OpenOptions::new()
        .create(true)
        .append(a.checkpoint.is_some())
        .write(true)
        .truncate(a.checkpoint.is_none())
        .open(&log_path)
        .map_err(|source| CliError::Io { path: log_path.clone(), source })?;
    trainer = trainer.with_log(Box::new(BufWriter::new(log)));
    let ckpt_path = a.out.join("checkpoint.rhyk");
    let fingerprint = data.fingerprint.clone();
    trainer.run(&data, None, |t| {
        let r = t.val_history.last().expect("epoch recorded");
        eprintln!("epoch {:>3}  val acc@1 {:.4}  val mrr {:.4}", r.epoch, r.val_acc1, r.val_mrr);
        crate::training::write_checkpoint(&ckpt_path, &t.checkpoint(&fingerprint))
    })?;
    let report = trainer.report(&data, Split::Val)?;
    write_json(Some(&a.out.join("val_report.json")), &report)?;
    eprintln!("best epoch {:?}; checkpoint {}", trainer.best_epoch(), ckpt_path.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let trainer = Trainer::from_checkpoint(read_checkpoint(&a.checkpoint)?)?;
    log_resolved("eval config", &trainer.config)?;
    let trajectories = load(&a.data, &trainer.config.model.grid)?;
    let fingerprint = dataset_fingerprint(&trajectories);
    let stored = read_checkpoint(&a.checkpoint)?.header.data_fingerprint;
    if fingerprint != stored {
        eprintln!("warning: data fingerprint {fingerprint} differs from the training data {stored}");
    }
    let data = Dataset::prepare(&trajectories, &trainer.config)?;
    let report = trainer.report(&data, a.split)?;
    write_json(a.out.as_deref(), &report)
}

fn baseline(a: BaselineArgs) -> Result<(), CliError> {
    log_resolved("baseline grid", &a.grid)?;
    let trajectories = load(&a.data, &a.grid)?;
    let (days, samples) = chronological_split(&trajectories, &a.grid, crate::data::DEFAULT_RATIOS)?;
    let model = FrequencyBaseline::fit(&trajectories, &a.grid, days.train_end);
    let outcomes = model.outcomes(samples.get(a.split), a.top_k);
    let report = BaselineReport {
        split: a.split,
        predictor: "frequency-baseline",
        metrics: summarize(&outcomes, &a.grid, a.top_k)?,
        days,
        data_fingerprint: dataset_fingerprint(&trajectories),
    };
    write_json(a.out.as_deref(), &report)
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let setup = GradcheckSetup { dim: a.dim, grid: a.grid, users: a.users, seed: a.seed, coords_per_tensor: a.coords };
    log_resolved("gradcheck setup", &setup)?;
    let report = end_to_end_gradcheck(&setup)?;
    write_json(None, &report)?;
    if report.max_rel_err > GRADCHECK_TOLERANCE || !report.max_rel_err.is_finite() {
        return Err(CliError::GradcheckFailed { max_rel_err: report.max_rel_err, tensor: report.worst_tensor });
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckpointSummary<'a> {
    header: &'a crate::training::CheckpointHeader,
    trainable_tensors: usize,
    trainable_scalars: usize,
    frozen_tensors: usize,
    frozen_scalars: usize,
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let summary = CheckpointSummary {
        header: &ckpt.header,
        trainable_tensors: ckpt.trainable.len(),
        trainable_scalars: ckpt.trainable.tensors().iter().map(|t| t.len()).sum(),
        frozen_tensors: ckpt.frozen.len(),
        frozen_scalars: ckpt.frozen.tensors().iter().map(|t| t.len()).sum(),
    };
    write_json(a.out.as_deref(), &summary)
}
