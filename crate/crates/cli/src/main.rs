use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use roblog_cli::commands::{cmd_conjugate, cmd_simulate, cmd_solve, cmd_verify, run, Overrides, EXIT_CONFIG};
use roblog_cli::config::{ConventionName, ModeName};

/// Robust log-utility maximization via quadratic BSDEs.
#[derive(Debug, Parser)]
#[command(name = "roblog", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Problem description (TOML)
    #[arg(long, global = true, env = "ROBLOG_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory, overrides output.directory
    #[arg(long, global = true, env = "ROBLOG_OUT")]
    out: Option<PathBuf>,
    /// Number of simulated paths
    #[arg(long, global = true, env = "ROBLOG_PATHS")]
    paths: Option<usize>,
    /// Seed for simulation and verification
    #[arg(long, global = true, env = "ROBLOG_SEED")]
    seed: Option<u64>,
    /// Time steps N
    #[arg(long, global = true, env = "ROBLOG_STEPS")]
    steps: Option<usize>,
    #[arg(long, global = true, env = "ROBLOG_MODE", value_enum)]
    mode: Option<ModeName>,
    #[arg(long, global = true, env = "ROBLOG_CONVENTION", value_enum)]
    convention: Option<ConventionName>,
    /// Worker threads; never changes results
    #[arg(long, global = true, env = "ROBLOG_WORKERS")]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the value BSDE and dump the solution
    Solve,
    /// Run martingale, saddle and generator checks
    Verify,
    /// Forward-simulate wealth under the optimal strategy
    Simulate,
    /// Tabulate the penalty conjugate
    Conjugate {
        /// lo:hi:step per axis
        #[arg(long, env = "ROBLOG_GRID")]
        grid: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let Some(config) = cli.config.clone() else {
        eprintln!("config error: --config (or ROBLOG_CONFIG) is required");
        return ExitCode::from(EXIT_CONFIG as u8);
    };
    let overrides = Overrides {
        out: cli.out,
        paths: cli.paths,
        seed: cli.seed,
        steps: cli.steps,
        mode: cli.mode,
        convention: cli.convention,
        workers: cli.workers,
    };
    let code = run(|| match &cli.command {
        Command::Solve => cmd_solve(&config, &overrides),
        Command::Verify => cmd_verify(&config, &overrides),
        Command::Simulate => cmd_simulate(&config, &overrides),
        Command::Conjugate { grid } => cmd_conjugate(&config, &overrides, grid.as_deref()),
    });
    ExitCode::from(code as u8)
}
