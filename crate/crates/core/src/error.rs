use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid root: {0}")]
    InvalidRoot(String),

    #[error("malformed case: {0}")]
    MalformedCase(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 3 for data problems, 4 for numerics, 2 for
    /// everything a user fixes by changing flags or config.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 4,
            Error::Config(_) | Error::Io { .. } => 2,
            _ => 3,
        }
    }
}
