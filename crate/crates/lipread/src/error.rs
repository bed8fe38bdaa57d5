use thiserror::Error;

/// Error kinds used across the crate. The CLI maps these onto exit codes:
/// config/contract/shape/mapping errors exit 1, data errors exit 2,
/// numeric divergence exits 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// A precondition of an operation was violated.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed binary file (checkpoint, .flo).
    #[error("format error: {0}")]
    Format(String),
    /// Dataset ingestion failure (missing frames, bad PGM, ...).
    #[error("ingestion error: {0}")]
    Ingestion(String),
    /// Layer mapping failure during weight inflation.
    #[error("mapping error: {0}")]
    Mapping(String),
    /// Training diverged (non-finite loss).
    #[error("numeric divergence: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Ingestion(_) | Error::Io(_) | Error::Format(_) => 2,
            _ => 1,
        }
    }
}
