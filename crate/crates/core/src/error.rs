use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth:e})")]
    PointBehindCamera { depth: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("need more than k={k} points to build a neighbor graph, got {n}")]
    TooFewPoints { n: usize, k: usize },

    #[error("candidate batch is empty")]
    EmptyBatch,

    #[error("index {index} out of bounds for length {len}")]
    IndexOutOfBounds { index: usize, len: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),

    #[error("cannot take quantiles of an empty list")]
    EmptyList,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported weights file version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
