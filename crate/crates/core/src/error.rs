use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("share party mismatch: {0}")]
    PartyMismatch(String),

    #[error("protocol desynchronized at round {round}: {detail}")]
    Desync { round: u32, detail: String },

    #[error("correlation budget exhausted: {kind} needs {requested}, {available} left")]
    BudgetExhausted {
        kind: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("shuffle correlation already consumed")]
    CorrelationReused,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("value {value} at row {row}, column {col} is outside the public domain [{lower}, {upper}]")]
    OutOfDomain {
        row: usize,
        col: usize,
        value: u64,
        lower: u64,
        upper: u64,
    },

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("selectivity calibration failed: {0}")]
    Calibration(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("connection closed by peer")]
    Closed,

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("remote error: {0}")]
    Remote(String),

    #[error("encrypted answer disagrees with the plaintext oracle: {0}")]
    OracleMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
