use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Row/column extent of a matrix, printed as `RxC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: u64, message: String },

    #[error("training diverged at epoch {epoch} on bag {app_id} (loss {loss})")]
    Diverged {
        epoch: usize,
        app_id: String,
        loss: f64,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape {
            op,
            lhs: Shape(lhs.0, lhs.1),
            rhs: Shape(rhs.0, rhs.1),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures decoding the binary bag and checkpoint formats.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file while reading {0}")]
    Truncated(&'static str),

    #[error("bag has zero instances")]
    EmptyBag,

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("unknown tensor block {0:?}")]
    UnknownTensor(String),

    #[error("missing tensor block {0:?}")]
    MissingTensor(String),

    #[error("tensor {name:?} has shape {found}, expected {expected}")]
    TensorShape {
        name: String,
        found: Shape,
        expected: Shape,
    },

    #[error("bad metadata: {0}")]
    Metadata(String),

    #[error("{0} trailing bytes after last block")]
    TrailingBytes(usize),
}
