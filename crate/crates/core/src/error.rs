//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("{op}: input outside domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: degenerate input ({detail})")]
    Degenerate { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes at row {row}")]
    LabelOutOfRange { row: usize, label: i64, classes: usize },

    #[error("axis {axis} invalid for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },

    #[error("variable belongs to a different tape")]
    StaleVar,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("config error: {0}")]
    Config(String),

    #[error("config error at line {line}, key `{key}`: {msg}")]
    ConfigKey { key: String, line: usize, msg: String },

    #[error("logit queue is empty (warm-up incomplete)")]
    EmptyQueue,

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("SGLD chain diverged at step {step}")]
    ChainDivergence { step: usize },

    #[error("non-finite loss at step {step} (ce={ce}, cl={cl}, gen={gen:?})")]
    NonFiniteLoss {
        step: u64,
        ce: f64,
        cl: f64,
        gen: Option<f64>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("bad checkpoint magic")]
    CheckpointMagic,

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    CheckpointTruncated { offset: usize, needed: usize },

    #[error("checkpoint dims {found:?} do not match requested {expected:?}")]
    CheckpointDims { found: Vec<usize>, expected: Vec<usize> },

    #[error("idx {file}: bad magic {found:#010x} at offset 0 (expected {expected:#010x})")]
    IdxMagic {
        file: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("idx {file}: truncated at offset {offset} (needed {needed} more bytes)")]
    IdxTruncated {
        file: &'static str,
        offset: usize,
        needed: usize,
    },

    #[error("idx count mismatch: {images} images vs {labels} labels (offset 4)")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("csv parse error at line {line}: {msg}")]
    CsvParse { line: usize, msg: String },

    #[error("report mixes config hashes {0} and {1}")]
    HashMismatch(String, String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
