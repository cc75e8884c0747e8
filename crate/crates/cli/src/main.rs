//! `corrnet` command-line driver.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "corrnet", version, about = "Learned correspondence weighting for relative pose")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory (default: runs/<timestamp>-s<seed>).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Default dataset directory.
    #[arg(long, global = true, env = "CORRNET_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test synthetic pairs.
    Synth(SynthArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Run a checkpoint on a pairs file (weights and net_8pt essentials).
    Infer(InferArgs),
    /// Compare pose accuracy of methods on a dataset.
    Eval(EvalArgs),
    /// Sequential per-pair timing of methods.
    Bench(BenchArgs),
    /// Train and evaluate all four loss variants with shared seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (default: data dir, else <run dir>/data).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total pairs, split 60/20/20; overrides the split section.
    #[arg(long)]
    pub total: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub n_correspondences: Option<usize>,
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Correspondences sampled per pair and step (0 = all).
    #[arg(long)]
    pub subsample: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub beta_activation_step: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub val_every: Option<u64>,
    /// Validation pairs per check (0 = all).
    #[arg(long)]
    pub val_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory holding train.bin and val.bin.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// ours, classification, essential or direct.
    #[arg(long)]
    pub variant: Option<String>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct EvalOverrides {
    /// Comma-separated: ransac, mlesac, lmeds, net_8pt, net_ransac, oracle.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub keep_threshold: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub inlier_threshold: Option<f64>,
    /// Evaluate only the first pairs (0 = all).
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory (uses test.bin) or a pairs file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: EvalOverrides,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[command(flatten)]
    pub overrides: EvalOverrides,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated subset of variants (default: all four).
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[command(flatten)]
    pub eval: EvalOverrides,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.steps, self.steps);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.subsample, self.subsample);
        set(&mut t.lr, self.lr);
        set(&mut t.width, self.width);
        set(&mut t.blocks, self.blocks);
        set(&mut t.val_every, self.val_every);
        set(&mut t.val_limit, self.val_limit);
        set(&mut cfg.loss.alpha, self.alpha);
        set(&mut cfg.loss.beta, self.beta);
        set(&mut cfg.loss.beta_activation_step, self.beta_activation_step);
    }
}

impl EvalOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.eval.methods, self.methods.clone());
        set(&mut cfg.eval.keep_threshold, self.keep_threshold);
        set(&mut cfg.eval.limit, self.limit);
        set(&mut cfg.robust.max_iterations, self.max_iterations);
        set(&mut cfg.robust.inlier_threshold, self.inlier_threshold);
    }
}

/// File config, then global flags, then subcommand flags.
fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    match &cli.command {
        Command::Synth(a) => {
            if let Some(total) = a.total {
                let c = corrnet::data::SplitCounts::from_total(total);
                cfg.split.train = c.train;
                cfg.split.val = c.val;
                cfg.split.test = c.test;
            }
            set(&mut cfg.split.train, a.train);
            set(&mut cfg.split.val, a.val);
            set(&mut cfg.split.test, a.test);
            set(&mut cfg.synth.n_correspondences, a.n_correspondences);
            set(&mut cfg.synth.outlier_fraction, a.outlier_fraction);
            set(&mut cfg.synth.pixel_noise_sigma, a.noise);
        }
        Command::Train(a) => {
            if let Some(v) = &a.variant {
                let variant = v.parse().map_err(error::CliError::config)?;
                cfg.set_variant(variant);
            }
            a.overrides.apply(&mut cfg);
        }
        Command::Infer(_) => {}
        Command::Eval(a) => a.overrides.apply(&mut cfg),
        Command::Bench(a) => {
            a.overrides.apply(&mut cfg);
            set(&mut cfg.eval.repetitions, a.repetitions);
            set(&mut cfg.eval.warmup, a.warmup);
        }
        Command::Ablate(a) => {
            a.overrides.apply(&mut cfg);
            a.eval.apply(&mut cfg);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    if cli.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let ctx = commands::Context::new(&cli, cfg)?;
    match &cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Infer(a) => commands::infer(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Bench(a) => commands::bench(&ctx, a),
        Command::Ablate(a) => commands::ablate(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
