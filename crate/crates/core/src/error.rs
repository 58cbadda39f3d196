use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} index {index} out of range 1..={max}")]
    Index { what: &'static str, index: i64, max: usize },

    #[error("numerical instability at step {step}: {detail}")]
    Instability { step: usize, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("line density truncation lost {lost:.3e} of the mass (limit {limit:.0e})")]
    Truncation { lost: f64, limit: f64 },

    #[error("replica {replica} failed: {source}")]
    Replica {
        replica: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    /// Wraps an error with the replica index so a failing draw can be replayed.
    pub fn in_replica(self, replica: u64) -> Self {
        match self {
            e @ Error::Replica { .. } => e,
            e => Error::Replica { replica, source: Box::new(e) },
        }
    }
}
