//! Experiment runner behind the `stocon` binary.
//!
//! Output files and their columns:
//!
//! * `iterations.csv`: `iter,mu,step_error,constraint_integral,cost_J`
//! * `fields.csv`: `n,t,node,x,[y,]control,state_mean,adjoint_mean`
//! * `errors.csv`: `h_label,cells,steps,h,tau,paths,seed,strong_l2_state,strong_l2_adjoint,strong_l2_control,h1_state,h1_adjoint,mu_error,mu,iterations,converged`
//! * `orders.json`: slope and r² per error quantity against `h` and `tau`
//! * `table.csv` / `table_scientific.csv`: one row per δ, one column per mesh size
//! * `cells.csv`: one row per table cell with estimator details
//! * `summary.json` (solve) and `verify.json` (verify)

pub mod config;
pub mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Command, Options, RunConfig};
pub use run::run;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure in {cell}: {source}")]
    Numerical {
        cell: String,
        #[source]
        source: stocon_core::Error,
    },
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical { .. } => 3,
            CliError::Output(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stocon", version, about = "Stochastic parabolic optimal control experiments")]
pub struct Cli {
    /// TOML file with default options; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Debug, Subcommand)]
pub enum Commands {
    /// One optimization run: iterations.csv, fields.csv, summary.json.
    Solve(Options),
    /// Error sweep over mesh sizes: errors.csv and orders.json.
    Convergence(Options),
    /// Converged constraint integrals per delta and mesh size: table.csv.
    ConstraintTable(Options),
    /// Residuals of the manufactured solution: verify.json.
    Verify(Options),
}

impl Cli {
    /// Merges flags over the config file and validates the result.
    pub fn into_config(self) -> Result<RunConfig, CliError> {
        let (command, flags) = match self.command {
            Commands::Solve(o) => (Command::Solve, o),
            Commands::Convergence(o) => (Command::Convergence, o),
            Commands::ConstraintTable(o) => (Command::ConstraintTable, o),
            Commands::Verify(o) => (Command::Verify, o),
        };
        let file = match &self.config {
            Some(path) => Options::from_file(path)?,
            None => Options::default(),
        };
        RunConfig::resolve(command, flags.merge(file))
    }
}

/// Thread count from `--threads`, else `STOCON_THREADS`, else rayon's default.
pub fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("STOCON_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| CliError::Config(format!("STOCON_THREADS must be a positive integer, got '{v}'")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
