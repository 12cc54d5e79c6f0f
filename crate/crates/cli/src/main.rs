//! `gradlab`: run experiments on gradient interface models from JSON configs.
//!
//! Exit status: 0 success, 1 invalid input, 2 numerical failure, 3 a check
//! failed (for example scanned values outside the asserted bounds).

mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Command;
use error::CliError;

#[derive(Parser)]
#[command(name = "gradlab", version, about = "Decimation, RWR checks and samplers for gradient interface models")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Experiment config or a manifest written by a previous run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this; 1 runs sequentially.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the command's tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Growth, curvature and smallness conditions for a potential.
    Check,
    /// Scan -D^{ij}F_x over stencils and compare with the bounds.
    Rwr,
    /// Closed-form mixture covariances against quadrature.
    Bk,
    /// Run a Markov chain and record energies and field dumps.
    Sample,
    /// Gradient covariance decay table and power-law fit.
    Decay,
    /// Central limit statistic replicates.
    Clt,
    /// Surface tension on a tilt grid and its convexity margin.
    Sigma,
    /// Coupled Langevin runs under shared noise.
    Couple,
    /// Whatever command the config names; use this to rerun a manifest.
    Run,
}

impl Sub {
    fn command(self) -> Option<Command> {
        Some(match self {
            Sub::Check => Command::Check,
            Sub::Rwr => Command::Rwr,
            Sub::Bk => Command::Bk,
            Sub::Sample => Command::Sample,
            Sub::Decay => Command::Decay,
            Sub::Clt => Command::Clt,
            Sub::Sigma => Command::Sigma,
            Sub::Couple => Command::Couple,
            Sub::Run => return None,
        })
    }
}

fn execute(cli: &Cli) -> Result<String, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Validation("--config is required".into()))?;
    let cfg = config::load(path)?;
    if let Some(want) = cli.command.command() {
        if want != cfg.command {
            return Err(CliError::Validation(format!(
                "config key `command`: config is for `{}`, not `{}`",
                cfg.command.name(),
                want.name()
            )));
        }
    }
    let cfg = cfg.resolve(cli.seed, cli.tol)?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Validation("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Numerical(format!("thread pool: {e}")))?;
    }
    let out = run::Out::new(&cli.out)?;
    run::run(&cfg, &out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gradlab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
