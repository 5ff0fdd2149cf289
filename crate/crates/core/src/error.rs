use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed scan {path}: {reason}")]
    MalformedScan { path: PathBuf, reason: String },

    #[error("corrupt data in {path}: non-finite value at point {index}")]
    CorruptData { path: PathBuf, index: usize },

    #[error("label count mismatch: {labels} labels for {points} points")]
    LabelMismatch { labels: usize, points: usize },

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("manifest {path} line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(
        "grid overflow at point {point}: axis {axis} index {value} does not fit in {bits} bits"
    )]
    GridOverflow {
        point: usize,
        axis: usize,
        value: i64,
        bits: u32,
    },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("patch boundaries do not partition 0..{len}: {detail}")]
    Partition { len: usize, detail: String },

    #[error("unknown condition {0:?}")]
    UnknownCondition(String),

    #[error("embedding table error: {0}")]
    Embedding(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("schedule exhausted: step {step} > total {total}")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("invalid prediction {pred} at index {index}")]
    InvalidPrediction { index: usize, pred: usize },

    #[error("scan has no labels")]
    MissingLabels,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss at epoch {epoch} step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input (configuration, flags) rather
    /// than failures while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
