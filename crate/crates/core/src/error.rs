use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("truncated payload: header declares {declared} bytes, {present} present")]
    TruncatedPayload { declared: u64, present: u64 },
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot place {0} anomaly blobs without overlap")]
    InfeasibleLayout(usize),
    #[error("zero-norm vector in similarity")]
    ZeroVector,
    #[error("window size {0} must be odd")]
    EvenWindow(usize),
    #[error("coarse background mask flags every pixel; no background samples to train on")]
    EmptyBackground,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite intermediate value at tape node {0}")]
    NonFiniteIntermediate(usize),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch} of task {task}")]
    NonFiniteLoss { task: usize, epoch: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("task {0} already present in replay buffer")]
    DuplicateTask(usize),
    #[error("ground truth contains a single class")]
    SingleClassTruth,
    #[error("need at least two ROC points, got {0}")]
    TooFewPoints(usize),
    #[error("backward transfer undefined for a single task")]
    BwtUndefined,
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::IoFailure { path, source }
        }
    }
}
