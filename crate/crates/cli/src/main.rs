//! `switchode`: experiment runner for Markov-modulated ODEs.
//!
//! Exit codes: 0 success, 1 failed reproduction criteria, 2 invalid input,
//! 3 numerical non-convergence (the report is still written).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use switchode::rng::DEFAULT_SEED;
use switchode::Error;

#[derive(Debug, Parser)]
#[command(name = "switchode", version, about = "Markov-modulated ODE toolkit")]
struct Cli {
    /// Master seed (default 0x5EED_C0DE_0001).
    #[arg(long, global = true, value_parser = parse_seed)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// First-order coefficient c1 of the invariant-measure expansion.
    Expand(ExpandArgs),
    /// Order-0 and order-1 terms of the finite-time expansion.
    Semigroup(SemigroupArgs),
    #[command(subcommand)]
    Lyapunov(LyapunovCmd),
    #[command(subcommand)]
    Lv(LvCmd),
    #[command(subcommand)]
    Split(SplitCmd),
    #[command(subcommand)]
    Env(EnvCmd),
    /// Run an acceptance suite and print a pass/fail table.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct McArgs {
    /// Values of epsilon (repeatable).
    #[arg(long = "eps")]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 2000.0)]
    pub horizon: f64,
    #[arg(long = "burn-in", default_value_t = 100.0)]
    pub burn_in: f64,
    /// Independent trajectories per epsilon.
    #[arg(long, default_value_t = 4)]
    pub traj: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExpandArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub mc: McArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SemigroupArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub t: f64,
    #[arg(long = "eps")]
    pub eps: Vec<f64>,
}

#[derive(Debug, Subcommand)]
pub enum LyapunovCmd {
    /// CSV of (p, lambda_max, c1) over the two-state family.
    Sweep(SweepArgs),
    /// Monte Carlo top Lyapunov exponent.
    Mc(LyapunovMcArgs),
    /// Search for a destabilization certificate.
    Certify(CertifyArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// lo:step:hi or a comma list.
    #[arg(long, default_value = "0.01:0.01:0.99")]
    pub grid: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LyapunovMcArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Use π = (1 − p, p) instead of the model's environment.
    #[arg(long)]
    pub p: Option<f64>,
    #[command(flatten)]
    pub mc: McArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CertifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "0.01:0.01:0.99")]
    pub grid: String,
    #[arg(long, default_value_t = 0.02)]
    pub margin: f64,
    #[command(flatten)]
    pub mc: McArgs,
}

#[derive(Debug, Subcommand)]
pub enum LvCmd {
    /// Invasion rate at ε = 0 and its first-order coefficient.
    C1(ModelArgs),
    /// Monte Carlo invasion rates.
    Mc(LvMcArgs),
    /// Sign rule on random two-state draws.
    Signs(SignsArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LvMcArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub mc: McArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SignsArgs {
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
}

#[derive(Debug, Subcommand)]
pub enum SplitCmd {
    /// Weak error of the randomized splitting.
    WeakError(SplitArgs),
    /// Richardson-extrapolated weak error.
    Richardson(SplitArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "eps")]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub t: f64,
    /// Monte Carlo replicates; the exact scheme mean is used when absent.
    #[arg(long)]
    pub mc: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum EnvCmd {
    /// Validate the environment and print π, the spectral gap and Q⁻¹.
    Check(ModelArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReproduceArgs {
    #[arg(long, value_parser = ["fast", "full"])]
    pub suite: String,
}

fn parse_seed(s: &str) -> Result<u64, String> {
    let t = s.replace('_', "");
    match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => t.parse(),
    }
    .map_err(|e| format!("invalid seed '{s}': {e}"))
}

#[derive(Debug)]
pub enum Failure {
    Input(String),
    Numerical(String),
    /// The report was written but flags non-convergence.
    Unconverged,
    CriteriaFailed(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::NotIrreducible { .. } | Error::DegenerateBatches { .. } => {
                Failure::Input(e.to_string())
            }
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(format!("i/o: {e}"))
    }
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("SWITCHODE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Failure::Input(format!("SWITCHODE_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Input(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    eprintln!("switchode {}: master seed {seed:#x}", output::VERSION);
    let start = std::time::Instant::now();
    let result = configure_threads().and_then(|()| commands::run(cli.command, seed, cli.out.as_deref()));
    eprintln!("elapsed {:.3} s", start.elapsed().as_secs_f64());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::CriteriaFailed(n)) => {
            eprintln!("{n} criteria failed");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Unconverged) => {
            eprintln!("result did not converge; report written");
            ExitCode::from(3)
        }
    }
}
