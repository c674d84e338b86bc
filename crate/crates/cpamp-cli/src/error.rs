use cpamp::CpampError;
use std::fmt::Display;

/// Command failure, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Io(String),
    /// `verify` found a difference.
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Mismatch(_) => 1,
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    /// Prefixes the message, keeping the class.
    pub fn context(self, what: impl Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{what}: {m}")),
            CliError::Divergence(m) => CliError::Divergence(format!("{what}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{what}: {m}")),
            CliError::Mismatch(m) => CliError::Mismatch(format!("{what}: {m}")),
        }
    }
}

impl From<CpampError> for CliError {
    fn from(e: CpampError) -> Self {
        match e {
            CpampError::Divergence { .. } | CpampError::NotPsd(_) => CliError::Divergence(e.to_string()),
            CpampError::Io(_) | CpampError::Serde(_) => CliError::Io(e.to_string()),
            CpampError::InvalidArgument(_) | CpampError::DimensionMismatch(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
