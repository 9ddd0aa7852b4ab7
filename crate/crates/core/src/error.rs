use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value at ({row}, {col}): {detail}")]
    Numeric { row: usize, col: usize, detail: String },

    #[error("{path}: format error at byte {offset}: {detail}")]
    Format { path: String, offset: u64, detail: String },

    #[error("{path}: unsupported {kind} version {found} (expected {expected})")]
    Version {
        path: String,
        kind: &'static str,
        found: u16,
        expected: u16,
    },

    #[error("{path}: {detail}")]
    Config { path: String, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
