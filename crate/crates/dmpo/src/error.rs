//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by policies, weight computations, the trainer and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition (bad index, duplicate
    /// mode, malformed dataset line, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An exact-enumeration request exceeds the configured caps.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Configuration rejected before any work started.
    #[error("config error: {0}")]
    Config(String),

    /// Every log-weight in a group sits at the -inf sentinel; no valid
    /// normalization exists.
    #[error("degenerate weight group: {0}")]
    DegenerateGroup(String),

    /// API misuse, e.g. backprop against a stale forward tape.
    #[error("usage error: {0}")]
    Usage(String),

    /// Checkpoint container could not be read or has the wrong version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
