//! Command-line driver: mission configuration parsing, planner and rollout
//! orchestration, and plain-text trace files.
//!
//! Exit codes: 0 on success, 2 for configuration, file, or shape problems,
//! 3 when planning cannot produce a feasible result.

pub mod commands;
pub mod config;
pub mod trace;

use connplan_core::Error;

/// Failure modes the binary maps to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, unreadable or inconsistent files: exit 2.
    Usage(String),
    /// The mission itself cannot be planned or simulated: exit 3.
    Infeasible(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Infeasible(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Domain(_) | Error::Protocol(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Infeasible(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
