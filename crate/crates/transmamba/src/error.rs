use std::path::Path;

use thiserror::Error;

/// Errors surfaced by the command-line front end, each with a stable exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0} failing properties")]
    PropertyFailure(usize),
    #[error("non-finite loss {value} at step {step}")]
    NumericAbort { step: usize, value: f64 },
    #[error(transparent)]
    Core(transmamba_core::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 0 ok, 1 property failure, 2 usage/config, 3 numeric abort.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::PropertyFailure(_) => 1,
            CliError::NumericAbort { .. } => 3,
            CliError::Core(transmamba_core::Error::NonFiniteLoss { .. }) => 3,
            _ => 2,
        }
    }
}

impl From<transmamba_core::Error> for CliError {
    fn from(e: transmamba_core::Error) -> Self {
        match e {
            transmamba_core::Error::NonFiniteLoss { step, value } => CliError::NumericAbort { step, value },
            transmamba_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}
