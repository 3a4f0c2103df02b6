//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by simulator components.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's contract (bad shapes, empty inputs,
    /// out-of-range values).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Dirichlet partitioning could not give every client at least one
    /// sample within the retry budget.
    #[error("partitioning failed: client {client} still empty after {attempts} attempts")]
    Partition { client: usize, attempts: usize },

    /// Aggregation rejected a client update.
    #[error("aggregation error for client {client}: {detail}")]
    Aggregation { client: usize, detail: String },

    /// A client-local training task failed; carries the originating client
    /// and round.
    #[error("training failed (client {client}, round {round}): {source}")]
    ClientTraining {
        client: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    /// A loss evaluation produced a non-finite value.
    #[error("non-finite loss at batch {batch}: {value}")]
    NonFiniteLoss { batch: usize, value: f64 },

    /// Optimization diverged past the abort threshold.
    #[error("training diverged: loss {last} after {steps} steps (threshold {threshold})")]
    Diverged { last: f64, steps: usize, threshold: f64 },

    /// Configuration file problems (missing keys, invalid values).
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint container problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset loading/synthesis problems.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("experiment stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Wrap an error with the client/round context it occurred in.
    pub fn in_client(self, client: usize, round: usize) -> Self {
        Error::ClientTraining {
            client,
            round,
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
