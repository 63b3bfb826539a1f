use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("label {label:?} not in schema {schema:?}")]
    Schema { label: String, schema: Vec<String> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error in {context}: {msg}")]
    Numeric { context: String, msg: String },

    #[error("no face found in image")]
    Detection,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing dataset(s) for protocol: {0:?}")]
    MissingDataset(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown protocol {0:?}")]
    UnknownProtocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
