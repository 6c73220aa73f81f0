use std::path::Path;
use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Diagnostics(String),

    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Validation(_) => 1,
            CliError::Diagnostics(_) => 2,
            CliError::Io(_) => 3,
        })
    }

    pub fn io(path: &Path, e: std::io::Error) -> CliError {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<omsim::Error> for CliError {
    fn from(e: omsim::Error) -> CliError {
        use omsim::Error as E;
        match e {
            E::Diagnostics(_) | E::NoConvergence { .. } => CliError::Diagnostics(e.to_string()),
            E::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> CliError {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
