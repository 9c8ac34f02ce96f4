//! The `soi` command line: one binary, one config schema, one subcommand per
//! pipeline stage.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::run;
pub use config::{DataSection, EvalSection, ModelSection, PathsSection, RunConfig};

use crate::synth::ShapeStyle;

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Config = 1,
    Data = 2,
    Numeric = 3,
    Io = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct CliError {
    pub status: ExitStatus,
    pub message: String,
}

impl CliError {
    pub fn new(status: ExitStatus, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "soi", version, about = "Web-image self-supervised pretraining and few-shot evaluation")]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.total_steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Override the top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch, quality-check and pool images from `data.manifest` or `data.dir`.
    Ingest {
        /// Add to the existing pool instead of rebuilding it.
        #[arg(long)]
        append: bool,
    },
    /// Six-metric entropy per dataset (image directories or pool caches).
    Analyze {
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
    },
    /// Contrastive pretraining on the pool cache.
    Pretrain {
        /// Continue from the latest trainer checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop (resumably) once this many steps have completed.
        #[arg(long, hide = true)]
        halt_at: Option<u64>,
    },
    /// Episodic evaluation of a frozen encoder on `eval.dataset`.
    Eval {
        /// Defaults to `<checkpoints>/encoder.soi`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export encoder embeddings of a labeled dataset as CSV.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `eval.dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to `<reports>/embeddings.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Double-precision gradient checks of every differentiable layer.
    Gradcheck,
    /// Write the procedural shape corpus as `dir/<class>/<index>.png`.
    Synth {
        dir: PathBuf,
        #[arg(long, default_value = "colored-texture")]
        style: ShapeStyle,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}
