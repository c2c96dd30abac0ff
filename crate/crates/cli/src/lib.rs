//! Batch front end: each subcommand reads files or regenerates data from the
//! config, runs one stage and writes deterministic JSON/CSV into `--out`.
//! Wall-clock timings go to a `<command>.meta.json` sidecar so the reports
//! themselves are byte-identical on rerun.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use commands::{run, Outcome};
pub use config::{CalibSweepConfig, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or arguments; exit code 2.
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(mpq_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<mpq_core::Error> for CliError {
    fn from(e: mpq_core::Error) -> Self {
        match e {
            mpq_core::Error::InvalidArgument(msg) => CliError::Usage(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mpq", version, about = "Mixed-precision INT8/FP16 quantization pipeline")]
pub struct Cli {
    /// Base seed for data, weights and training order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Directory with `train.jsonl`, `eval.jsonl` and `pool.jsonl` from
    /// `gen-data`; splits without a file are regenerated from the config.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
    Pool,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Independent,
    Nested,
}

impl From<SamplingArg> for mpq_core::Sampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::Independent => mpq_core::Sampling::Independent,
            SamplingArg::Nested => mpq_core::Sampling::Nested,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    PerTensor,
    PerChannel,
}

impl From<GranularityArg> for mpq_core::Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::PerTensor => mpq_core::Granularity::PerTensor,
            GranularityArg::PerChannel => mpq_core::Granularity::PerChannel,
        }
    }
}

/// Trained model; defaults to `<out>/model`.
#[derive(Debug, Clone, Args)]
pub struct ModelArg {
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibArgs {
    /// Calibration scenes drawn from the pool.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingArg>,
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes as JSONL plus a manifest.
    GenData {
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Scene count (overrides the split's configured size).
        #[arg(long)]
        size: Option<usize>,
        /// Per-scene outlier probability for the generated split(s).
        #[arg(long)]
        outlier_rate: Option<f64>,
    },
    /// Pretrain the FP32 detector and save it to `<out>/model`.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Calibrate a model and write `calib-stats.json`.
    Calibrate {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        calib: CalibArgs,
        #[arg(long, default_value_t = 0)]
        calib_seed: u64,
    },
    /// One-layer-at-a-time INT8 sensitivity sweep.
    Sweep {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        calib: CalibArgs,
        /// Comma-separated calibration seeds, one sweep each.
        #[arg(long, value_delimiter = ',')]
        calib_seeds: Option<Vec<u64>>,
    },
    /// Top-k selection and greedy FP16 candidates from a sweep report.
    Plan {
        /// `sweep.json`; defaults to `<out>/sweep.json`.
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Quantization-aware fine-tuning of one plan.
    Qat {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        calib: CalibArgs,
        /// Plan such as `INT8` or `FP16: 1,3`.
        #[arg(long, default_value = "INT8")]
        plan: String,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Evaluate a model under a plan and write the AP table.
    Eval {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        calib: CalibArgs,
        #[arg(long, default_value = "FP32")]
        plan: String,
        /// Calibration stats for INT8 layers; calibrated on the fly if absent.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Latency estimates and speedups from a per-layer table.
    Latency {
        /// Built-in fixture name.
        #[arg(long)]
        device: Option<String>,
        /// CSV table; takes precedence over `--device`.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Plans to estimate (repeatable).
        #[arg(long = "plan")]
        plans: Vec<String>,
        #[arg(long, default_value = "FP32")]
        baseline: String,
    },
    /// Score versus calibration-set size.
    CalibSweep {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_enum)]
        sampling: Option<SamplingArg>,
        #[arg(long, default_value = "INT8")]
        plan: String,
    },
    /// Sweep, candidates, PTQ (and QAT), evaluation and latency in one report.
    Pipeline {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n_calib: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        calib_seeds: Option<Vec<u64>>,
        /// Add QAT variants of INT8 and every candidate.
        #[arg(long)]
        qat: bool,
        #[arg(long)]
        device: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Calibrate { .. } => "calibrate",
            Command::Sweep { .. } => "sweep",
            Command::Plan { .. } => "plan",
            Command::Qat { .. } => "qat",
            Command::Eval { .. } => "eval",
            Command::Latency { .. } => "latency",
            Command::CalibSweep { .. } => "calib-sweep",
            Command::Pipeline { .. } => "pipeline",
        }
    }
}
