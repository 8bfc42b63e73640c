//! The `modtune` command line: pretraining, routed tuning, evaluation, generation,
//! sweeps, gradient checks and metrics analysis.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "modtune", version, about = "Mixture-of-Depths tuning for small decoder-only transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a base model from scratch with every parameter trainable.
    Pretrain(TrainArgs),
    /// Tune a base checkpoint with adapters and/or a routed exit head.
    Tune(TrainArgs),
    /// Score a checkpoint on the evaluation split.
    Eval(EvalArgs),
    /// Decode from a prompt and report the compute spent.
    Generate(GenerateArgs),
    /// Tune every (k, top_k) pair up to `sweep.max_k`.
    Sweep(SweepArgs),
    /// Compare analytic and finite-difference gradients of the routed objective.
    Gradcheck(GradcheckArgs),
    /// Smooth a metrics log with a centered moving average.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created atomically.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// Base checkpoint to start from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Number of exits.
    #[arg(long)]
    pub k: Option<usize>,
    /// Exits kept per token, or `none` for dense routing.
    #[arg(long = "top-k")]
    pub top_k: Option<String>,
    /// Distillation weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "max-steps")]
    pub max_steps: Option<usize>,
    /// Seed for initialization and batch order; repeat to run several seeds.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Skip layers above the deepest selected exit.
    #[arg(long = "early-exit")]
    pub early_exit: bool,
    /// `none` or `propagate`.
    #[arg(long)]
    pub cache: Option<String>,
    #[arg(long = "max-new-tokens")]
    pub max_new_tokens: Option<usize>,
    /// Override the checkpoint's top_k; `none` for dense routing.
    #[arg(long = "top-k")]
    pub top_k: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Metrics log to read.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Tune(a) => commands::tune(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Analyze(a) => commands::analyze(&a),
    }
}
