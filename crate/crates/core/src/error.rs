// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not agree for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A gradient was requested for a value that is not part of the record.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Invalid user input (tokens, sequences, suite names, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A fixed-capacity structure (decode cache, template pool) is exhausted.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Ill-formed margin objective.
    #[error("objective error: {0}")]
    Objective(String),

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Labels do not contain enough classes.
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    /// Theorem instance with a zero direction.
    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),

    /// A split-provenance assertion failed.
    #[error("leakage detected: {0}")]
    Leakage(String),

    /// An interventional probe stayed below the accuracy gate after retrying.
    #[error("probe accuracy gate failed: {0}")]
    ProbeGate(String),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
