use thiserror::Error;

use crate::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("degenerate feature row {row}: norm {norm:e} is below the normalization threshold")]
    DegenerateFeature { row: usize, norm: f64 },

    #[error("loss node must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("model has no classification heads")]
    NoHeads,

    #[error("task {0} already has a head")]
    DuplicateTask(TaskId),

    #[error("task {0} is not registered")]
    UnknownTask(TaskId),

    #[error("label {label} is outside the {classes} declared classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {class} appears in more than one task")]
    OverlappingClasses { class: usize },

    #[error("{classes} classes cannot be split into tasks of {per_task}")]
    NotDivisible { classes: usize, per_task: usize },

    #[error("{metric} is undefined for {tasks} task(s)")]
    UndefinedMetric { metric: &'static str, tasks: usize },

    #[error("accuracy entry ({row}, {col}) lies above the diagonal")]
    AboveDiagonal { row: usize, col: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, left, right }
    }
}
