use thiserror::Error;

pub type Result<T> = std::result::Result<T, AtlasError>;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("invalid spin chain spec: {0}")]
    InvalidSpec(String),

    #[error("invalid pulse: {0}")]
    InvalidPulse(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("dataset format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("landscape analysis error: {0}")]
    Landscape(String),

    #[error("benchmark error: {0}")]
    Bench(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
