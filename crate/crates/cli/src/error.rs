use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Flags that parse but do not combine; exits like a clap error.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] cellscope_core::Error),

    #[error(transparent)]
    Service(#[from] cellscope_service::ServiceError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<cellscope_core::model::format::WeightFormatError> for CliError {
    fn from(e: cellscope_core::model::format::WeightFormatError) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
