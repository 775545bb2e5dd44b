//! Command-line front end: synthetic data, single solves, regularization
//! paths and oracle cross-checks.
//!
//! Exit codes: 0 success with a certificate, 2 finished without one (or an
//! inconclusive check), 3 bad input, 4 numerical failure or a failed check.

pub mod commands;
pub mod config;
pub mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{CheckArgs, DataArgs, GenArgs, ProblemKind};
pub use config::{RunConfig, SharedArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("cannot write output: {0}")]
    Output(String),
    #[error(transparent)]
    Solver(#[from] tracenorm::Error),
    /// Solver and oracle disagree.
    #[error("check failed: {0}")]
    Disagreement(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use tracenorm::Error as E;
        match self {
            CliError::Input(_) => 3,
            CliError::Solver(E::Dimension(_) | E::Precondition(_)) => 3,
            CliError::Output(_) | CliError::Solver(_) | CliError::Disagreement(_) => 4,
        }
    }
}

/// How a command that ran to completion ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Certified,
    /// Finished without a certificate, or a check that could not decide.
    Uncertified,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Certified => 0,
            Outcome::Uncertified => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tracenorm", version, about = "Trace-norm regularized low-rank matrix completion and regression")]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic completion or regression instance.
    Gen(GenArgs),
    /// Solve a matrix completion problem at one λ.
    Complete(DataArgs),
    /// Solve a multivariate regression problem at one λ.
    Regress(DataArgs),
    /// Trace the regularization path over a geometric λ grid.
    Path {
        #[command(flatten)]
        data: DataArgs,
        /// Also run the path with the predictor disabled.
        #[arg(long)]
        compare_warm: bool,
    },
    /// Compare the solver with the dense reference solver.
    Check(CheckArgs),
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    let out: PathBuf = cli.shared.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::Output(format!("{}: {e}", out.display())))?;
    match cli.command {
        Command::Gen(args) => commands::gen(&cli.shared, &args),
        Command::Complete(data) => commands::solve(&cli.shared, &data, Some(ProblemKind::Completion), "complete"),
        Command::Regress(data) => commands::solve(&cli.shared, &data, Some(ProblemKind::Regression), "regress"),
        Command::Path { data, compare_warm } => commands::path(&cli.shared, &data, compare_warm),
        Command::Check(args) => commands::check(&cli.shared, &args),
    }
}
