use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "np-robust", version, about = "Train, attack, compress and analyze neighborhood-preserving networks")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// key=value file with training settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Stratified subset size of the split a command reads. Without it,
    /// splits are cut to 10000 train / 2000 test samples.
    #[arg(long, global = true)]
    pub subset: Option<usize>,
    /// Use whole splits.
    #[arg(long, global = true, conflicts_with = "subset")]
    pub full: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an FC or NP network.
    Train(TrainArgs),
    /// Accuracy under PGD over a grid of budgets.
    Eval(EvalArgs),
    /// Attack the test split at one budget and save the adversarial images.
    Attack(AttackArgs),
    /// Replace the reference table by per-class k-means representatives.
    Compress(CompressArgs),
    /// Empirical Lipschitz and weight-norm bound checks.
    Analyze(AnalyzeArgs),
    /// Low-dimensional graph embedding of the training inputs.
    InitEmbed(InitEmbedArgs),
    /// Write a synthetic dataset as IDX files.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding train-* and t10k-* IDX files (optionally gzipped).
    #[arg(long, default_value = "data/mnist")]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = ["fc", "np"], default_value = "np")]
    pub bottleneck: String,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Checkpoint stem inside the output directory; defaults to <bottleneck><dim>.
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub settings: TrainFlags,
}

/// One flag per training key; unset flags fall back to the config file,
/// then to the defaults.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub graph_refresh_epochs: Option<usize>,
    #[arg(long)]
    pub neg_samples: Option<usize>,
    #[arg(long, value_parser = ["sgd", "momentum"])]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub init_epochs: Option<usize>,
    #[arg(long)]
    pub init_lr: Option<f64>,
    #[arg(long)]
    pub encoder_warmup_epochs: Option<usize>,
    /// Train adversarially at this budget.
    #[arg(long)]
    pub adv_eps: Option<f64>,
    /// PGD iterations of the adversarial batch.
    #[arg(long, alias = "adv-steps")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub adv_alpha: Option<f64>,
    #[arg(long)]
    pub adv_random_start: Option<bool>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint stem (path without .manifest).
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated budgets.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.01, 0.05, 0.1, 0.2])]
    pub eps: Vec<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 250)]
    pub batch: usize,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub eps: f64,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Step size; defaults to eps/10.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub random_start: bool,
    #[arg(long, default_value_t = 250)]
    pub batch: usize,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub clusters_per_class: usize,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// NP checkpoint for the Lipschitz check.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Run the weight check on this many seeded Gaussian trials.
    #[arg(long)]
    pub synthetic_fc: Option<u64>,
    #[arg(long, default_value_t = 2000)]
    pub fc_n: usize,
    #[arg(long, default_value_t = 100)]
    pub fc_p: usize,
    #[arg(long, default_value_t = 8)]
    pub fc_d: usize,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 200)]
    pub dirs: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
}

#[derive(Args, Debug)]
pub struct InitEmbedArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[command(flatten)]
    pub settings: TrainFlags,
    /// Embed encoder outputs of this checkpoint instead of raw inputs.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// two_moons or gaussian_blobs(c,p)
    #[arg(long, default_value = "two_moons")]
    pub kind: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub test_n: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

/// Failure after all outputs were written: a checked invariant tripped.
#[derive(Debug)]
pub struct InvariantTripped(pub String);

impl std::fmt::Display for InvariantTripped {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invariant tripped: {}", self.0)
    }
}

impl std::error::Error for InvariantTripped {}

/// Usage errors caught after argument parsing.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn run(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let ctx = commands::Context { cli, started };
    match &cli.command {
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Attack(a) => commands::attack(&ctx, a),
        Command::Compress(a) => commands::compress(&ctx, a),
        Command::Analyze(a) => commands::analyze(&ctx, a),
        Command::InitEmbed(a) => commands::init_embed(&ctx, a),
        Command::Synth(a) => commands::synth(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else if e.downcast_ref::<InvariantTripped>().is_some()
                || matches!(e.downcast_ref::<np_robust::Error>(), Some(np_robust::Error::Constraint(_)))
            {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}
