//! Job runner for the keldysh solvers: parses job files, runs oracle, 2PI, oscillator
//! and spectral jobs (singly or as sweeps), writes columnar trajectories with a JSON
//! manifest, checkpoints long runs and compares trajectories.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod manifest;
pub mod output;
pub mod run;

use std::fmt;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_BLOWUP: i32 = 3;
pub const EXIT_RESOURCE: i32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Job file, command line or input file rejected.
    Config(String),
    /// Cap exceeded before or during a run.
    Resource(String),
    /// A solver failed; `context` names the run.
    Solver {
        context: String,
        error: keldysh::Error,
    },
    Io(String),
}

impl CliError {
    pub fn from_solver(context: &str, error: keldysh::Error) -> Self {
        CliError::Solver { context: context.to_string(), error }
    }

    pub fn exit_code(&self) -> i32 {
        use keldysh::Error as E;
        match self {
            CliError::Config(_) => EXIT_VALIDATION,
            CliError::Resource(_) => EXIT_RESOURCE,
            CliError::Io(_) => EXIT_IO,
            CliError::Solver { error, .. } => match error {
                E::Validation(_) | E::Range(_) | E::InsufficientData(_) => EXIT_VALIDATION,
                E::Resource(_) => EXIT_RESOURCE,
                E::Blowup { .. } | E::Convergence { .. } | E::Reflection { .. } => EXIT_BLOWUP,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid input: {m}"),
            CliError::Resource(m) => write!(f, "resource cap: {m}"),
            CliError::Solver { context, error } => write!(f, "{context}: {error}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
