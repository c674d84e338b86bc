//! `cpamp`: config-driven AMP change-point experiments.
//!
//! Exit codes: 0 success, 1 `verify` mismatch, 2 config error, 3 numerical
//! divergence, 4 I/O error.

mod commands;
mod config;
mod error;
mod output;

use clap::{Parser, Subcommand};
use commands::Context;
use error::{CliError, CliResult};
use output::SeMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "cpamp", version, about = "AMP change-point detection experiments")]
struct Cli {
    /// Experiment config (JSON). Keys can be overridden with CPAMP__SECTION__KEY=value.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Validate the config and print the plan without computing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic datasets, one per grid point and trial.
    Generate,
    /// Run AMP trials; write diagnostics, posteriors, estimates and summary tables.
    Run,
    /// Iterate the state evolution only.
    Se {
        #[arg(long, value_enum, default_value = "ensemble")]
        mode: SeMode,
    },
    /// Posterior over change points for a saved dataset.
    Posterior {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare AMP with draws from its state-evolution limit.
    Evaluate,
    /// Re-run one recorded trial of a results directory and compare.
    Verify {
        /// Results directory (defaults to --out).
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        delta_index: usize,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
}

fn execute(cli: Cli) -> CliResult<()> {
    if let Command::Verify { results, delta_index, trial } = &cli.command {
        let dir = results.clone().or(cli.out.clone()).ok_or_else(|| CliError::Config("verify needs --results or --out".into()))?;
        // The recorded config is complete; environment overrides do not apply.
        let loaded = config::load(&dir.join("config.resolved.json"), [])?;
        return commands::verify(&loaded, &dir, *delta_index, *trial);
    }
    let path = cli.config.clone().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut loaded = config::load(&path, std::env::vars())?;
    if let Some(seed) = cli.seed {
        loaded.config.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| loaded.config.output.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output in the config".into()))?;
    loaded.config.output = Some(out.clone());
    let ctx = Context { loaded, out, dry_run: cli.dry_run };
    match &cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Run => commands::run(&ctx),
        Command::Se { mode } => commands::se(&ctx, *mode),
        Command::Posterior { data } => commands::posterior(&ctx, data),
        Command::Evaluate => commands::evaluate(&ctx),
        Command::Verify { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.workers {
        Some(0) => Err(CliError::Config("--workers must be at least 1".into())),
        Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(|| execute(cli)),
            Err(e) => Err(CliError::Config(format!("worker pool: {e}"))),
        },
        None => execute(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
