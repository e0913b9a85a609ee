use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // data pipeline
    #[error("dataset root {root:?} has only {found} of 8 class directories (missing: {missing:?})")]
    MissingClassDir {
        root: PathBuf,
        found: usize,
        missing: Vec<String>,
    },
    #[error("dataset at {0:?} contains no images")]
    EmptyDataset(PathBuf),
    #[error("failed to decode image {path:?}: {reason}")]
    DecodeError { path: String, reason: String },
    #[error("invalid split fractions {0:?}: must be positive and sum to 1")]
    InvalidFractions((f64, f64, f64)),
    #[error("split {0} is empty")]
    EmptySplit(String),

    // augmentation
    #[error("beta concentration must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("invalid augmentation parameters: {0}")]
    InvalidMixParams(String),

    // models
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("layer {layer:?} has spatial size {height}x{width}; need at least 2x2")]
    NonSpatialLayer {
        layer: String,
        height: usize,
        width: usize,
    },
    #[error("checkpoint checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    // training
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    // metrics
    #[error("length mismatch: {truths} truths vs {predictions} predictions")]
    LengthMismatch { truths: usize, predictions: usize },
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("unknown report format {0:?}")]
    UnknownFormat(String),
    #[error("parse error: {0}")]
    ParseError(String),

    // explanations
    #[error("invalid segment count {0}")]
    InvalidSegmentCount(usize),
    #[error("degenerate LIME sampling: {0}")]
    DegenerateSampling(String),
    #[error("invalid explanation parameters: {0}")]
    InvalidXaiConfig(String),

    #[error("plot error: {0}")]
    Plot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::ParseError(e.to_string())
    }
}
