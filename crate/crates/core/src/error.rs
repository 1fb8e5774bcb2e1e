use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("layer {layer} ({kind}): {message}")]
    Layer {
        layer: usize,
        kind: &'static str,
        message: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("{actual} bytes present but only {expected} declared")]
    TrailingBytes { expected: usize, actual: usize },

    #[error("overlapping parameter ranges: {0}")]
    OffsetOverlap(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("IDX magic mismatch in {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("unknown synthetic dataset kind {0:?}")]
    UnknownKind(String),

    #[error("calibration cache was built from model {cached}, not {model}")]
    DigestMismatch { cached: String, model: String },

    #[error("missing spiking configuration: model has {expected} spiking layers, got {found} configs")]
    MissingConfig { expected: usize, found: usize },

    #[error("empty calibration cache")]
    EmptyCache,

    #[error("class count mismatch: model has {model}, caller expects {expected}")]
    ClassCount { model: usize, expected: usize },

    #[error("plan mismatch: {0}")]
    PlanMismatch(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
