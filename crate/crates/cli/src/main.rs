mod cli;
mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::Parser;
use market_select::pipeline::ConfigError;
use market_select::pool::PoolError;
use market_select::tune::TuneError;
use market_select::verify::VerifyError;
use market_select::Error;

use cli::{Cli, Command};

/// Bad flags, files or settings (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Inputs that load but contradict each other or a model invariant (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InvariantError(pub String);

const EXIT_INVARIANT: u8 = 1;
const EXIT_IO_CONFIG: u8 = 2;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_io_or_config() { EXIT_IO_CONFIG } else { EXIT_INVARIANT };
        }
        if let Some(e) = cause.downcast_ref::<PoolError>() {
            return if e.is_io_or_parse() { EXIT_IO_CONFIG } else { EXIT_INVARIANT };
        }
        if let Some(e) = cause.downcast_ref::<TuneError>() {
            return match e {
                TuneError::Io { .. } | TuneError::Parse { .. } => EXIT_IO_CONFIG,
                _ => EXIT_INVARIANT,
            };
        }
        if let Some(e) = cause.downcast_ref::<VerifyError>() {
            return match e {
                VerifyError::InvalidConfig(_) | VerifyError::UnknownSignal(_) | VerifyError::EmptyGrid => EXIT_IO_CONFIG,
                _ => EXIT_INVARIANT,
            };
        }
        if cause.is::<InvariantError>() {
            return EXIT_INVARIANT;
        }
        if cause.is::<UsageError>()
            || cause.is::<ConfigError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
            || cause.is::<csv::Error>()
        {
            return EXIT_IO_CONFIG;
        }
    }
    EXIT_INVARIANT
}

fn init_logging(verbose: bool) {
    let default = if verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| UsageError(format!("cannot start {n} worker threads: {e}")))?;
    }
    match &cli.command {
        Command::Select { pipeline, out_dir } => commands::select(pipeline, out_dir),
        Command::Signals { pipeline, out } => commands::signals(pipeline, out.as_deref()),
        Command::Price { pipeline, out } => commands::price(pipeline, out.as_deref()),
        Command::Tune {
            pipeline,
            dev_feedback,
            eta,
            rounds,
            out,
        } => commands::tune(pipeline, dev_feedback, *eta, *rounds, out.as_deref()),
        Command::Simulate(sim) => commands::simulate(sim),
        Command::Sweep {
            pipeline,
            beta_grid,
            gamma_grid,
            out,
        } => commands::sweep(pipeline, beta_grid, gamma_grid, out.as_deref()),
        Command::Explain { run_dir, id, pool, json } => commands::explain_cmd(run_dir, id, pool.clone(), *json),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
