//! Experiment drivers behind the `pinn-sim` binary.

pub mod config;
pub mod pipeline;

use std::fmt;

pub use config::RunConfig;

/// Failure classes with stable process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 1.
    Config(String),
    /// Exit code 2.
    Missing(String),
    /// Exit code 3.
    Numeric(String),
    /// Anything else; exit code 1.
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Other(_) => 1,
            CliError::Missing(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Missing(m) => write!(f, "missing input: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<pinn_sim::Error> for CliError {
    fn from(e: pinn_sim::Error) -> Self {
        use pinn_sim::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => CliError::Missing(msg),
            E::NonFinite(_) | E::NonFiniteLoss { .. } => CliError::Numeric(msg),
            E::InvalidParameter(_) | E::MissingField(_) => CliError::Config(msg),
            _ => CliError::Other(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
