use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("non-finite loss contribution from sample {index}")]
    NonFiniteSample { index: usize },

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("bisection failed to bracket quantile {0}")]
    Bracket(f64),

    #[error("empty dataset: {0}")]
    Empty(&'static str),

    #[error("constant column {column} (std = 0)")]
    ConstantColumn { column: String },

    #[error("degenerate target range (max = min = {0})")]
    DegenerateRange(f64),

    #[error("zero rank variance in spearman input")]
    ConstantRanks,

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("missing column `{column}` in {path}")]
    MissingColumn { path: PathBuf, column: String },

    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
