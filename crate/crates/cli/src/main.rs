//! `pdfevo` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on configuration or input errors, 2 when the
//! solver fails to converge.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use pdfevo::coefficients::Equation;
use pdfevo_cli::{run_compare, run_mc, run_propagator_bench, run_solve, CliError, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "pdfevo", version, about = "Response-density evolution under coloured noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Fpk,
    Sct,
    Ngfpk,
    LinearExact,
}

impl From<Method> for Equation {
    fn from(m: Method) -> Self {
        match m {
            Method::Fpk => Equation::Fpk,
            Method::Sct => Equation::Sct,
            Method::Ngfpk => Equation::Ngfpk,
            Method::LinearExact => Equation::LinearExact,
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output.dir` of the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve the density on the grid.
    Solve {
        #[arg(long, value_enum)]
        method: Method,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Monte Carlo reference run.
    Mc {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare two artifact directories.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write `compare.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Truncated series for the transition matrix against RK4.
    PropagatorBench {
        #[command(flatten)]
        run: RunArgs,
        /// Directory of the run providing the moment history.
        #[arg(long)]
        moments: Option<PathBuf>,
    },
}

fn load(run: &RunArgs) -> Result<(RunConfig, PathBuf), CliError> {
    let mut config = RunConfig::load(&run.config)?;
    if let Some(seed) = run.seed {
        config.seed = seed;
    }
    let out = run
        .out
        .clone()
        .or_else(|| config.output.dir.clone())
        .ok_or_else(|| ConfigError::Invalid {
            key: "output.dir".into(),
            message: "no output directory (pass --out or set output.dir)".into(),
        })?;
    Ok((config, out))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve { method, run } => {
            let (config, out) = load(&run)?;
            run_solve(&config, method.into(), &out)?;
        }
        Command::Mc { run } => {
            let (config, out) = load(&run)?;
            run_mc(&config, &out)?;
        }
        Command::Compare { a, b, out } => {
            let report = run_compare(&a, &b, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
        }
        Command::PropagatorBench { run, moments } => {
            let (config, out) = load(&run)?;
            run_propagator_bench(&config, moments.as_deref().map(Path::new), &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
