use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed {file}, line {line}: {detail}")]
    Malformed { file: String, line: usize, detail: String },

    #[error("index out of range in {file}, line {line}: {index} >= {bound}")]
    IndexOutOfRange {
        file: String,
        line: usize,
        index: usize,
        bound: usize,
    },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    /// Process exit status for the CLI: 1 for contract errors, 2 for I/O or format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. } | Error::Contract(_) | Error::Divergence { .. } => 1,
            Error::MissingFile(_)
            | Error::Malformed { .. }
            | Error::IndexOutOfRange { .. }
            | Error::Io(_)
            | Error::Json(_) => 2,
        }
    }
}
