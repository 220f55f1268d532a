//! `clustcontrast`: staged command-line pipeline.
//!
//! Each stage reads files written by earlier stages, checks their digests,
//! and writes its outputs plus a `manifest.json` into `--out`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use clustcontrast::Error;

#[derive(Debug, Parser)]
#[command(name = "clustcontrast", version, about = "Rank differentially expressed features by cluster-specific contrasts")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Global {
    /// Master seed; stage seeds are derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a correlated-blocks dataset with ground truth.
    Simulate(commands::SimulateArgs),
    /// Standardize columns and fit the mixture (fixed g or BIC over a range).
    Fit(commands::FitArgs),
    /// Rank features by the weighted contrast statistic W.
    Rank(commands::RankArgs),
    /// Permutation null, fitted t and per-feature P-values.
    Pvalue(commands::PvalueArgs),
    /// BH or local-FDR selection from a P-value table.
    Fdr(commands::FdrArgs),
    /// Pooled two-sample t-test ranking.
    Ttest(commands::TtestArgs),
    /// FDP/power against ground truth for one or more rankings.
    Benchmark(commands::BenchmarkArgs),
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::ParameterDomain(_)) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    let out = cli
        .global
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out <DIR> is required".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| {
        CliError::Core(Error::Io {
            path: out.clone(),
            source: e,
        })
    })?;
    let ctx = commands::Context {
        seed: cli.global.seed,
        out,
        argv: std::env::args().collect(),
    };
    match cli.command {
        Command::Simulate(a) => commands::simulate(&ctx, &a),
        Command::Fit(a) => commands::fit(&ctx, &a),
        Command::Rank(a) => commands::rank(&ctx, &a),
        Command::Pvalue(a) => commands::pvalue(&ctx, &a),
        Command::Fdr(a) => commands::fdr(&ctx, &a),
        Command::Ttest(a) => commands::ttest(&ctx, &a),
        Command::Benchmark(a) => commands::benchmark(&ctx, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
