//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the public API.
///
/// Shape and dimension mismatches inside the autodiff tape are programmer
/// errors and panic instead; everything that depends on runtime data (files,
/// configs, optimization state) goes through this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument for {context}: {message}")]
    InvalidArgument {
        context: &'static str,
        message: String,
    },

    #[error("non-finite value in {node}: first offending entry at ({row}, {col})")]
    NonFinite {
        node: String,
        row: usize,
        col: usize,
    },

    #[error("optimization diverged at step {step}: loss {loss:.6e} stayed above the threshold multiple of initial loss {initial:.6e} for {window} consecutive steps")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        window: usize,
    },

    #[error("sampling plan infeasible at level {level}: requested {requested}, available {available}")]
    PlanInfeasible {
        level: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
