use std::path::PathBuf;

/// Failures of the command-line surface, each mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] slnet_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    /// 1 for usage, 2 for data and format problems, 3 for numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(slnet_core::Error::NonFinite(_)) => 3,
            CliError::Core(slnet_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
