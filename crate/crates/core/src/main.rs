use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quintic::harness::{self, Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "quintic", version, about = "Reproducible quintic NLS and three-body mean-field experiments")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Split-step quintic or cubic-quintic NLS run.
    Nls(Common),
    /// Finite-N trace distance against the NLS product state.
    NbodyConverge(Common),
    /// Integral hierarchy residual of factorized NLS solutions.
    DuhamelResidual(Common),
    /// Collapse-map classes, echelon counts and bounds.
    Boardgame(Common),
    /// Weighted integral and multilinear bound probes.
    Bounds(Common),
    /// Reordering identity of contraction integrands.
    Commutation(Common),
}

#[derive(Args)]
struct Common {
    /// Flat TOML configuration; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed; overrides the configuration value.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads recorded in the artifact headers.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(command) = cli.command else {
        print!("{}", harness::usage());
        return ExitCode::SUCCESS;
    };
    let (exp, common) = match command {
        Command::Nls(c) => (Experiment::Nls, c),
        Command::NbodyConverge(c) => (Experiment::NbodyConverge, c),
        Command::DuhamelResidual(c) => (Experiment::DuhamelResidual, c),
        Command::Boardgame(c) => (Experiment::Boardgame, c),
        Command::Bounds(c) => (Experiment::Bounds, c),
        Command::Commutation(c) => (Experiment::Commutation, c),
    };
    let result = match &common.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
    .and_then(|cfg| harness::run(exp, &cfg, common.seed, &common.out, common.threads));
    match result {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            for path in &outcome.artifacts {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
