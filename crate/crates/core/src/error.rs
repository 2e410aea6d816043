//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error classes; the CLI maps each one to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // dataio
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("file contains no samples: {0}")]
    EmptyFile(PathBuf),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("too few subjects: need at least {needed}, found {found}")]
    TooFewSubjects { needed: usize, found: usize },
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),

    // wavelet
    #[error("signal is empty or shorter than two samples")]
    EmptySignal,
    #[error("invalid scale range: {0}")]
    InvalidRange(String),

    // augment / nn
    #[error("bad shape: expected {expected}, got {got}")]
    BadShape { expected: String, got: String },
    #[error("augmentation pipeline is empty")]
    EmptyPipeline,
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss: {0}")]
    NonfiniteLoss(String),
    #[error("corrupt checkpoint manifest: {0}")]
    CorruptManifest(String),
    #[error("checkpoint size mismatch: manifest declares {declared} values, blob holds {found}")]
    SizeMismatch { declared: usize, found: usize },
    #[error("checkpoint blob digest mismatch: manifest {expected}, blob {found}")]
    CorruptBlob { expected: String, found: String },

    // contrastive / downstream
    #[error("zero-norm vector in similarity")]
    ZeroVector,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("labels missing: {0}")]
    LabelsMissing(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    // eval
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("degenerate confusion matrix: chance agreement is 1")]
    Degenerate,
    #[error("window length mismatch: {0} vs {1}")]
    WindowMismatch(usize, usize),
    #[error("split leakage: window of subject `{subject}` used in {phase}")]
    Leakage { subject: String, phase: String },
    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    // config
    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn bad_shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::BadShape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::UnknownArch(_) | Error::InvalidParams(_) => ErrorClass::Config,
            Error::NonfiniteLoss(_)
            | Error::ZeroVector
            | Error::Degenerate
            | Error::EmptyMatrix => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
            Error::Csv(e) if e.is_io_error() => ErrorClass::Io,
            Error::Fold { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
