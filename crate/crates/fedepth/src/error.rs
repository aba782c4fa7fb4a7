use thiserror::Error;

/// Failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// No pixel survived validity filtering, so a masked mean is undefined.
    #[error("validity mask is empty")]
    EmptyValidity,

    #[error("incompatible parameter sets: {0}")]
    IncompatibleParameters(String),

    #[error("ingestion failed for:\n{}", paths.join("\n"))]
    Ingestion { paths: Vec<String> },

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("participant {id} failed in round {round}: {reason}")]
    ParticipantFailure {
        id: usize,
        round: usize,
        reason: String,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ledger error: {0}")]
    Ledger(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
