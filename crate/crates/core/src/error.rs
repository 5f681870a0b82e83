use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("NaN encountered in {0}")]
    NaN(String),

    #[error("non-binary operand at {layer}: {count} offending values")]
    NonBinary { layer: String, count: usize },

    #[error("backward needs a scalar root or an explicit seed (root shape {0:?})")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("architecture parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("attention error: {0}")]
    Attention(String),

    #[error("unknown layer {0}")]
    UnknownLayer(String),

    #[error("not enough epochs in trace: have {have}, need {need}")]
    InsufficientEpochs { have: usize, need: usize },

    #[error("pruning refused: shortcut {shortcut} fired {spikes} spikes on verification batch {batch}")]
    PruneRefused { shortcut: String, batch: usize, spikes: usize },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("bad magic number {found:#010x} in {what} (expected {expected:#010x})")]
    BadMagic { what: &'static str, expected: u32, found: u32 },

    #[error("truncated payload in {what}: expected {expected} bytes, found {found}")]
    Truncated { what: &'static str, expected: usize, found: usize },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("unknown transform {0}")]
    UnknownTransform(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },

    #[error("checkpoint architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::ShapeMismatch { .. } => "ShapeError",
            Error::NaN(_) => "NaN",
            Error::NonBinary { .. } => "NonBinary",
            Error::NonScalarRoot(_) => "NonScalarRoot",
            Error::Config(_) => "ConfigError",
            Error::Parse { .. } => "ParseError",
            Error::Attention(_) => "AttentionError",
            Error::UnknownLayer(_) => "UnknownLayer",
            Error::InsufficientEpochs { .. } => "InsufficientEpochs",
            Error::PruneRefused { .. } => "PruneRefused",
            Error::Diverged { .. } => "Diverged",
            Error::DatasetNotFound(_) => "DatasetNotFound",
            Error::BadMagic { .. } => "BadMagic",
            Error::Truncated { .. } => "Truncated",
            Error::CountMismatch { .. } => "CountMismatch",
            Error::UnknownTransform(_) => "UnknownTransform",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::ArchMismatch(_) => "ArchMismatch",
            Error::Corrupt(_) => "CorruptPayload",
            Error::Io { .. } => "IoError",
        }
    }
}
