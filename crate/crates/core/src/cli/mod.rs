//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for invalid input (arguments, configuration,
//! schedules), 2 when a run fails at runtime.

pub mod config;
pub mod svg;
pub mod table;

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::write_atomic;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "synthboot", version, about = "Iterative synthetic-data bootstrapping simulator")]
pub struct Cli {
    /// Log level: -v for info, -vv for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct OutputFlags {
    /// Output directory, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the gap-vs-cost SVG.
    #[arg(long, overrides_with = "no_svg")]
    pub svg: bool,
    /// Skip the SVG.
    #[arg(long = "no-svg")]
    pub no_svg: bool,
}

impl OutputFlags {
    fn svg_override(&self) -> Option<bool> {
        match (self.svg, self.no_svg) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub output: OutputFlags,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run replicates on one thread.
    #[arg(long)]
    pub serial: bool,
    /// Also write `<label>_runs.csv` with every run's trajectory.
    #[arg(long)]
    pub per_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo runs of every configured policy.
    Simulate(SimulateArgs),
    /// Exact curves for every configured policy.
    Analytic {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: OutputFlags,
        /// Expected draws by Gauss-Hermite quadrature of `E[1/r]` (d <= 2).
        #[arg(long)]
        quadrature: bool,
    },
    /// Variance-minimizing allocation of a selected-sample budget.
    OptimalPolicy {
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        sigma2: f64,
        #[arg(long)]
        kappa2: f64,
        /// Initial parameter, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        theta0: Option<Vec<f64>>,
        /// Dimension; defaults to the length of `--theta0`, else 1.
        #[arg(long)]
        dim: Option<usize>,
        /// Compare against exhaustive enumeration.
        #[arg(long)]
        verify: bool,
    },
    /// Re-run `simulate` over a list of values for one numeric config key.
    Sweep {
        #[command(flatten)]
        sim: SimulateArgs,
        /// Dotted key such as `policy.exp.u`; a bare key applies to every policy that sets it.
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        values: Option<Vec<f64>>,
    },
    /// Largest |gap_sim - gap_analytic| / SE over matching rows.
    Compare {
        /// Simulation CSVs, or directories holding `*_agg.csv`.
        #[arg(long, required = true, num_args = 1..)]
        sim: Vec<PathBuf>,
        /// Analytic CSVs, or directories holding `*_analytic.csv`.
        #[arg(long, required = true, num_args = 1..)]
        analytic: Vec<PathBuf>,
        /// Exit with status 2 when the largest z-score exceeds this.
        #[arg(long)]
        max_z: Option<f64>,
    },
}

/// Parses `args` (program name first) and runs the command, printing the
/// report on `stdout` and errors on `stderr`. Returns the exit code.
pub fn run_from(
    args: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    match commands::execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
