use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid tubelet: {0}")]
    InvalidTubelet(String),
    #[error("invalid tube: {0}")]
    InvalidTube(String),
    #[error("tubelets share no frames")]
    NoTemporalOverlap,
    #[error("empty bag")]
    EmptyBag,
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("evaluation input: {0}")]
    Eval(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
