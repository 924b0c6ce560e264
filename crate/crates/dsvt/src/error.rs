//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps variants to exit codes: configuration and input problems
/// exit 2, invariant violations (from `check`) exit 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input (non-finite points, ragged attribute rows, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value violates its documented constraints.
    #[error("invalid config: {0}")]
    Config(String),

    /// An API contract between modules was broken (shape mismatch and the like).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A checked invariant failed; the message carries the minimal witness.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// File parsing failed; the message names the offending field or record.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
