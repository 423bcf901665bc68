use std::path::PathBuf;

/// Everything the command layer can fail with, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents are malformed.
    #[error("invalid file {path}: field `{field}`: {reason}")]
    Format { path: PathBuf, field: String, reason: String },

    #[error(transparent)]
    Core(coronet_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::Io { .. } | CliError::Format { .. } => 4,
            CliError::Core(coronet_core::Error::NonFinite(_)) => 3,
            CliError::Core(_) => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Format { path: path.into(), field: field.into(), reason: reason.into() }
    }
}

impl From<coronet_core::Error> for CliError {
    fn from(e: coronet_core::Error) -> Self {
        match e {
            coronet_core::Error::NonFinite(m) => CliError::NonFinite(m),
            e => CliError::Core(e),
        }
    }
}
