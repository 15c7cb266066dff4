use std::io;
use std::path::{Path, PathBuf};

/// Broad failure class; decides the process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
        found: Vec<u8>,
    },
    #[error("{path}: unsupported {what} {value}")]
    Unsupported {
        path: PathBuf,
        what: &'static str,
        value: u64,
    },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: u64 },
    #[error("{path}: non-finite value at voxel {index}")]
    NonFiniteValue { path: PathBuf, index: usize },
    #[error("{path}: corrupt checkpoint: {detail}")]
    CorruptCheckpoint { path: PathBuf, detail: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}:{line}: {detail}")]
    Config { path: PathBuf, line: usize, detail: String },
    #[error("{path}: malformed CSV: {detail}")]
    Csv { path: PathBuf, detail: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss at step {step} (sample {sample}); last good checkpoint kept")]
    NonFiniteLoss { step: u64, sample: String },
    #[error("{0}")]
    Usage(String),
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
    #[error(transparent)]
    Core(#[from] dc2fusion_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use dc2fusion_core::Error as C;
        match self {
            Error::Usage(_) | Error::Config { .. } => ErrorKind::Usage,
            Error::NonFiniteLoss { .. } | Error::ChecksFailed { .. } => ErrorKind::Numeric,
            Error::Core(C::NonFinite(_) | C::NonFiniteGradient(_)) => ErrorKind::Numeric,
            Error::Core(C::InvalidConfig(_) | C::SizeTooSmall(_) | C::TooFewSamples(_)) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
