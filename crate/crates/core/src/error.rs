use std::path::PathBuf;

use thiserror::Error;
use vega_autodiff::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Problems with the bytes of a VFT1 / VEA1 / VCK1 file.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated or oversized payload: header implies {expected} bytes, file has {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("class name is not valid UTF-8")]
    InvalidUtf8,
    #[error("duplicate class {0:?}")]
    DuplicateClass(String),
    #[error("class {0:?} has no vectors")]
    EmptyClass(String),
    #[error("class {class:?} vector {index} is all zeros")]
    ZeroVector { class: String, index: usize },
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("conversation {conversation:?} utterance {utterance:?}: {msg}")]
    Utterance {
        conversation: String,
        utterance: String,
        msg: String,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("split {name} would receive no conversations")]
    EmptySplit { name: &'static str },
    #[error("anchor class {0:?} has no instances")]
    EmptyAnchorClass(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("non-finite loss at step {step}: term {term} = {value}")]
    NonFiniteLoss { step: usize, term: String, value: f64 },
    #[error("class count mismatch: model has {model}, dataset has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            source,
        }
    }
}
