use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("incompatible parameters: expected digest {expected:#018x}, got {actual:#018x}")]
    IncompatibleParameters { expected: u64, actual: u64 },

    #[error("client {client_id} sent an increment for digest {actual:#018x}, expected {expected:#018x}")]
    RejectedIncrement { client_id: u64, expected: u64, actual: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in layer `{layer}`")]
    Numeric { layer: String },

    #[error("stale increment from client {client_id}: round {got}, server is at round {expected}")]
    StaleIncrement { client_id: u64, expected: u64, got: u64 },

    #[error("incomplete round {round}: missing increments from clients {missing:?}")]
    IncompleteRound { round: u64, missing: Vec<u64> },

    #[error("duplicate increment from client {0}")]
    DuplicateIncrement(u64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint not ready: {}", .0.display())]
    NotReady(PathBuf),

    #[error("corrupt checkpoint {}: {reason}", path.display())]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("framing error: {0}")]
    Framing(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("client {client_id} failed: {source}")]
    Client {
        client_id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
