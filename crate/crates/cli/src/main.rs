//! Command-line pipeline for place-based intervention evaluation: hexagonal
//! grids, record ingestion, balanced panels, spatial weights, fixed-effects
//! Poisson fits, effect sizes, and a synthetic closed loop.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{cmd_report, cmd_simulate, run_stages, Ctx, RunUpTo};
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "placeval",
    version,
    about = "Space-time panels and fixed-effects count models for place-based intervention evaluation"
)]
struct Cli {
    /// Path to the TOML run configuration.
    #[arg(short, long, global = true, default_value = "placeval.toml")]
    config: PathBuf,

    /// Override the configured output directory.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,

    /// Worker threads (default: PLACEVAL_THREADS or all cores).
    #[arg(short, long, global = true)]
    threads: Option<usize>,

    /// Print stage progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tessellate the boundary and write the cells table.
    Grid,
    /// Parse records, bin them into cell-periods, and write the drop ledger.
    Ingest,
    /// Assemble the balanced panel with lag and interaction columns.
    Panel,
    /// Build and export the configured spatial weight matrices.
    Weights,
    /// Fit one fixed-effects Poisson column per weight matrix.
    Fit,
    /// Fits plus effect sizes, counterfactuals, and cost-benefit sums.
    Effects,
    /// Generate synthetic crimes/blitzes CSVs with a known-truth file.
    Simulate,
    /// Full run: ingest -> panel -> weights -> fits -> effects -> manifest.
    Pipeline,
    /// Re-render tables and summaries from a previous run's artifacts.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = cli
        .threads
        .or_else(|| std::env::var("PLACEVAL_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("placeval: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }

    let (config, config_bytes) = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("placeval: {e:#}");
            return ExitCode::from(2);
        }
    };
    let ctx = match Ctx::new(config, config_bytes, cli.output_dir, cli.verbose) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("placeval: {}", e.message());
            return ExitCode::from(e.exit_code() as u8);
        }
    };

    let result = match cli.command {
        Command::Grid => run_stages(&ctx, RunUpTo::Grid),
        Command::Ingest => run_stages(&ctx, RunUpTo::Ingest),
        Command::Panel => run_stages(&ctx, RunUpTo::Panel),
        Command::Weights => run_stages(&ctx, RunUpTo::Weights),
        Command::Fit => run_stages(&ctx, RunUpTo::Fit),
        Command::Effects | Command::Pipeline => run_stages(&ctx, RunUpTo::Effects),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Report => cmd_report(&ctx),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("placeval: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
