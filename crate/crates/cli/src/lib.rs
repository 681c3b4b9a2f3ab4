//! The `nestnet` command line: synthesize data, train, evaluate, verify a
//! pair and explain a decision.

pub mod checkpoint;
mod commands;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::*;

/// Exit codes shared by every command.
pub mod exit {
    pub const OK: u8 = 0;
    pub const NON_MATCH: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const NUMERICAL: u8 = 3;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl fmt::Display) -> Self {
        Self { code: exit::USAGE, message: message.to_string() }
    }

    pub fn numerical(message: impl fmt::Display) -> Self {
        Self { code: exit::NUMERICAL, message: message.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "nestnet", version, about = "Fingerphoto verification with a nested-residual CNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-session fingerphoto dataset.
    Synth(SynthArgs),
    /// Train on session 1 and write a checkpoint.
    Train(TrainArgs),
    /// Enroll session 1, probe with session 2, write scores, DET and report.
    Eval(EvalArgs),
    /// Compare two images; exit 0 on match and 1 otherwise.
    Verify(VerifyArgs),
    /// Write a saliency map and overlay for one image.
    Explain(ExplainArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub identities: usize,
    #[arg(long, default_value_t = 10)]
    pub per_session: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Score every session-1 image instead of per-finger mean templates.
    #[arg(long)]
    pub per_image: bool,
    #[arg(long, default_value_t = 101)]
    pub det_points: usize,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExplainMethod {
    Gradcam,
    Occlusion,
    OcclusionHr,
    Lime,
    Gradient,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum)]
    pub method: ExplainMethod,
    /// `class` (predicted class), `class:K`, or `match:REF_IMAGE`.
    #[arg(long, default_value = "class")]
    pub target: String,
    /// Output prefix; `PREFIX.csv` and `PREFIX.ppm` are written.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Grad-CAM layer.
    #[arg(long, default_value = nestnet_core::explain::DEFAULT_GRADCAM_LAYER)]
    pub layer: String,
    /// Occlusion fill value; defaults to the checkpoint's mean training pixel.
    #[arg(long)]
    pub baseline: Option<f32>,
    /// LIME grid side (segments = side²).
    #[arg(long, default_value_t = 8)]
    pub lime_grid: usize,
    #[arg(long, default_value_t = 1000)]
    pub lime_samples: usize,
}

pub fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Explain(a) => cmd_explain(&a),
    }
}
