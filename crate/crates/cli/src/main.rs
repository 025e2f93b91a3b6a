//! `rrmo`: run synthetic experiments, fit per-arm outcome models, evaluate
//! and learn treatment policies from CSV data.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 runtime/numerical failure,
//! 4 data validation error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rrmo::{ErrorClass, GammaMode, ObjectiveSense};
use rrmo::estimators::EstimatorSpec;

#[derive(Parser, Debug)]
#[command(name = "rrmo", version, about = "Reduced-rank denoising for multi-objective policy evaluation and learning")]
pub struct Cli {
    /// Worker threads for simulation replications (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a synthetic experiment described by a JSON config.
    Simulate(SimulateArgs),
    /// Fit per-arm OLS and reduced-rank models plus a propensity model.
    Fit(FitArgs),
    /// Value a learned policy under one or more estimators (JSON on stdout).
    Evaluate(EvaluateArgs),
    /// Learn a logistic policy by gradient descent on an estimator.
    Learn(LearnArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Replaces the config's estimator list (repeatable).
    #[arg(long = "estimator")]
    pub estimators: Vec<EstimatorSpec>,
    #[arg(long)]
    pub rank: Option<usize>,
}

/// Data inputs and model options shared by `fit` and `learn`.
#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON sidecar naming the covariate, treatment and outcome columns.
    #[arg(long)]
    pub schema: PathBuf,
    /// Reduced-rank dimension; chosen by cross-validation when omitted.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value = "residual_precision")]
    pub gamma: GammaMode,
    /// Fit on the raw columns instead of standardizing them first.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// Model bundle written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// Policy written by `learn`.
    #[arg(long)]
    pub policy: PathBuf,
    /// Estimator to report (repeatable), e.g. `dm:rrr_mu` or `cv:observed_y:bhatx`.
    #[arg(long = "estimator", required = true)]
    pub estimators: Vec<EstimatorSpec>,
    /// Comma-separated weights; the policy's training weights when omitted.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub rho: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct LearnArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub estimator: EstimatorSpec,
    /// Comma-separated weights; all ones when omitted.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub rho: Option<Vec<f64>>,
    /// Optimizer config JSON (learning_rate, iterations, init, sense, intercept, seed).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sense: Option<ObjectiveSense>,
    /// Seed for `seeded_gaussian` initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Two-fold cross-fitting of the estimator weights.
    #[arg(long)]
    pub cross_fit: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Runtime => 3,
        ErrorClass::Data => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
