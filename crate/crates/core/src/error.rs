use std::path::PathBuf;

use crate::fixed_point::IterationTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dead pixel at (row {row}, col {col}): every mask frame is zero there")]
    DeadPixel { row: usize, col: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: bad magic (expected \"VSCI\")")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported tensor file version {version}")]
    UnsupportedVersion { path: PathBuf, version: u8 },

    #[error("{path}: unknown dtype code {code}")]
    UnknownDtype { path: PathBuf, code: u8 },

    #[error("{path}: dtype mismatch (expected {expected}, stored {found})")]
    DtypeMismatch {
        path: PathBuf,
        expected: &'static str,
        found: &'static str,
    },

    #[error("{path}: truncated tensor payload (header implies {expected} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("fixed-point iteration diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Box<IterationTrace>,
    },

    #[error("anderson mixing system is singular")]
    SingularAlpha,

    #[error("instance too large to densify: {size} > {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("training aborted in epoch {epoch}: {skipped} of {total} samples diverged")]
    TrainingAborted {
        epoch: usize,
        skipped: usize,
        total: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
