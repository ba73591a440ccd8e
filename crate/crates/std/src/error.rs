use std::path::PathBuf;

use demkit_core::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INVALID_HYPERPARAMS: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const USAGE: i32 = 64;
    pub const IO: i32 = 74;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, malformed or schema-violating config.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    /// Numeric failure at run time, including failed gradient checks.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::InvalidHyperparams(_) => exit::INVALID_HYPERPARAMS,
            CliError::Numeric(_) => exit::NUMERIC,
            CliError::Io { .. } => exit::IO,
        }
    }

    /// Classifies a core error raised while checking inputs.
    pub fn from_validation(e: CoreError) -> Self {
        match e {
            CoreError::InvalidConfig { .. } => CliError::InvalidHyperparams(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }

    /// Classifies a core error raised while computing.
    pub fn from_runtime(e: CoreError) -> Self {
        match e {
            CoreError::InvalidConfig { .. } => CliError::InvalidHyperparams(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
