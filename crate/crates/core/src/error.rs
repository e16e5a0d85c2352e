use thiserror::Error;

#[derive(Debug, Error)]
pub enum FearError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("channel mismatch: template has {template} channels, search has {search}")]
    ChannelMismatch { template: usize, search: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{0} is not a perfect square")]
    NotPerfectSquare(usize),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("box outside bounds: {0}")]
    BoxOutOfBounds(String),

    #[error("non-finite {component} loss")]
    NonFiniteLoss { component: &'static str },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FearError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        FearError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FearError>;
