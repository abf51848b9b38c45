use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing configuration keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("record misalignment: {0}")]
    Misaligned(String),
    #[error("training aborted: {0}")]
    Aborted(String),
    #[error("gate failed: {0}")]
    Gate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
