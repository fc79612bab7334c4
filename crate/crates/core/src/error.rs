use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GowebError {
    #[error("point lies outside the open unit ball (norm {norm})")]
    OutsideBall { norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("gradient undefined at coincident points")]
    CoincidentPoints,
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },
    #[error("all rows are masked")]
    AllMasked,
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("duplicate goal id {0}")]
    DuplicateId(u32),
    #[error("multiple roots: ids {0:?} are all on layer 0")]
    MultipleRoots(Vec<u32>),
    #[error("taxonomy has no layer-0 root")]
    MissingRoot,
    #[error("layer violation on edge {parent} -> {child}: {detail}")]
    LayerViolation { parent: u32, child: u32, detail: String },
    #[error("cycle detected through goal id {0}")]
    Cycle(u32),
    #[error("unknown goal id {0}")]
    UnknownGoal(u32),
    #[error("invalid layer {layer} for goal id {id}")]
    InvalidLayer { id: u32, layer: u8 },
    #[error("goal {0} is not attached to the tree")]
    Detached(u32),
    #[error("negative pool for goal {0} is empty")]
    EmptyNegativePool(u32),

    #[error("requested {k} clusters from {n} points")]
    TooManyClusters { k: usize, n: usize },
    #[error("events are not sorted by time for user {0}")]
    Unsorted(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("nonpositive revisit duration {0}")]
    NonPositiveDuration(f64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GowebError>;

impl GowebError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GowebError::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        GowebError::Shape { op, detail: detail.into() }
    }
}
