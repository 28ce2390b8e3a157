//! Command-line front end: `atkt prepare|train|eval|sweep|trace|synth`.

mod commands;
pub mod svg;
pub mod trace;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::data::DataError;
use crate::model::ModelError;
use crate::training::TrainError;

pub use commands::run;

#[derive(Debug, Parser)]
#[command(name = "atkt", version, about = "Attentive knowledge tracing with adversarial training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a triple-line dataset, segment long sequences and print stats.
    Prepare(PrepareArgs),
    /// Train on one fold (or all five) and write run artifacts.
    Train(RunArgs),
    /// Score a checkpoint on its fold split.
    Eval(EvalArgs),
    /// Train the epsilon x beta grid and report mean validation AUC.
    Sweep(RunArgs),
    /// Export one student's per-step mastery as CSV and SVG.
    Trace(TraceArgs),
    /// Generate a synthetic dataset from a learn/guess/slip process.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::data::DEFAULT_MAX_SEQ_LEN)]
    pub max_seq_len: usize,
    #[arg(long, value_enum, default_value_t = SegmentArg::Split)]
    pub segment: SegmentArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SegmentArg {
    Split,
    Truncate,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat `key = value` file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "all_folds")]
    pub fold: Option<usize>,
    #[arg(long)]
    pub all_folds: bool,
    /// Predict from the last hidden state alone.
    #[arg(long)]
    pub no_attention: bool,
    /// Leave wall-clock fields out of the outputs.
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A checkpoint file, or with `--all-folds` a directory of `fold-k/` runs.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction CSV path (a directory with `--all-folds`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, conflicts_with = "all_folds")]
    pub fold: Option<usize>,
    #[arg(long)]
    pub all_folds: bool,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Student id to trace; the first sequence when omitted.
    #[arg(long)]
    pub student: Option<String>,
    /// Comma-separated skill ids to track.
    #[arg(long, value_delimiter = ',')]
    pub skills: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub students: usize,
    #[arg(long, default_value_t = 10)]
    pub skills: usize,
    #[arg(long, default_value_t = 50)]
    pub len: usize,
    #[arg(long, default_value_t = 0.3)]
    pub learn: f64,
    #[arg(long, default_value_t = 0.2)]
    pub guess: f64,
    #[arg(long, default_value_t = 0.1)]
    pub slip: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) | CliError::Checkpoint(_) | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::SkillOutOfRange { .. } | ModelError::InvalidResponse(_) => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::EmptySplit => CliError::Data(e.to_string()),
            TrainError::Adversarial(crate::adversarial::AdversarialError::BadEpsilon(_))
            | TrainError::Adversarial(crate::adversarial::AdversarialError::BadBeta(_)) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}
