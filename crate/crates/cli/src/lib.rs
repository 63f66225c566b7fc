//! Library surface of the taskfuse CLI: config loading, the four commands,
//! and exit-code mapping. The binary is a thin wrapper so integration tests
//! can drive runs in-process.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::Parser;

use config::{Command, ResolvedConfig};

/// Exit codes: 0 success, 1 usage error, 2 merge/runtime error, 3 theory
/// invariant failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Theory(String),
}

impl CliError {
    pub fn usage(msg: String) -> CliError {
        CliError::Usage(msg)
    }
    pub fn runtime(msg: String) -> CliError {
        CliError::Runtime(msg)
    }
    pub fn theory(msg: String) -> CliError {
        CliError::Theory(msg)
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Theory(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
            CliError::Theory(_) => "theory_invariant",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "taskfuse",
    about = "Data-free model merging over task vectors",
    disable_help_subcommand = true
)]
pub struct Cli {
    /// Run configuration file (TOML); the `command` key selects the action.
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads for per-layer parallelism (default: machine parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Dot-path config override, e.g. `recipe.lambda=0.5`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Suppress the summary table.
    #[arg(long)]
    pub quiet: bool,
}

/// Execute a parsed invocation; returns the designated exit code. Errors go
/// to stderr as one machine-readable JSON record.
pub fn execute(cli: &Cli) -> i32 {
    match try_execute(cli) {
        Ok(()) => 0,
        Err(err) => {
            let record = serde_json::json!({
                "kind": err.kind(),
                "message": err.to_string(),
            });
            eprintln!("{record}");
            err.exit_code()
        }
    }
}

fn try_execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::usage("--threads must be positive".into()));
        }
        // Ignore the error if a global pool already exists (tests reuse the
        // process); thread count then stays at the earlier setting.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let env_seed = match std::env::var("MERGE_SEED") {
        Err(_) => None,
        Ok(text) => Some(text.parse::<u64>().map_err(|_| {
            CliError::usage(format!("MERGE_SEED must be an unsigned integer, got {text:?}"))
        })?),
    };
    let cfg: ResolvedConfig = config::load_config(&cli.config, &cli.overrides, env_seed)?;
    match cfg.command {
        Command::Merge => commands::run_merge(&cfg, cli.quiet),
        Command::Inspect => commands::run_inspect(&cfg, cli.quiet),
        Command::Diff => commands::run_diff(&cfg, cli.quiet),
        Command::Theory => commands::run_theory(&cfg, cli.quiet),
    }
}
