use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("assignment must be in {expected} mode")]
    Mode { expected: &'static str },

    #[error("assignment contains a non-finite entry at position {position}, rack type {rack_type}")]
    NonFinite { position: usize, rack_type: usize },

    #[error(
        "rack type {rack_type} is infeasible: needs {needed} additional positions but only {available} are vacant"
    )]
    Infeasible {
        rack_type: usize,
        needed: usize,
        available: usize,
    },

    #[error("rack type {0} has already been solved")]
    AlreadySolved(usize),

    #[error("invalid order: {0}")]
    InvalidOrder(String),

    #[error("exhaustive order search supports at most {max} rack types, got {got}")]
    TooManyTypes { got: usize, max: usize },

    #[error("enumeration space of {size} candidates exceeds the limit of {limit}")]
    SearchSpaceTooLarge { size: u128, limit: u128 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("non-finite value in policy {0}")]
    NonFinitePolicy(String),

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u64, expected: u64 },

    #[error("malformed document: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
