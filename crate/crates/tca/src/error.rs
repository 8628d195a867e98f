use std::path::PathBuf;

use tca_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum TcaError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type TcaResult<T> = Result<T, TcaError>;

impl TcaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TcaError::Io { path: path.into(), source }
    }

    /// Process exit code: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            TcaError::Usage(_) => 1,
            TcaError::Data(_) | TcaError::Io { .. } | TcaError::Json { .. } => 2,
            TcaError::Numerical(_) => 3,
            TcaError::Core(e) => match e {
                CoreError::InvalidConfig(_) => 1,
                CoreError::NonFinite(_) | CoreError::Degenerate(_) => 3,
                _ => 2,
            },
        }
    }
}
