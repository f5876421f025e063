use thiserror::Error;

#[derive(Debug, Error)]
pub enum VaporError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, VaporError>;
