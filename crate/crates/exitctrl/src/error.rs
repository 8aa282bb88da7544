//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A problem/config document violates the JSON schema. `path` names the
    /// offending location, e.g. `sigma[1][0].op`.
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("unknown catalog entry `{0}`")]
    UnknownCatalog(String),

    /// An expression node is not allowed in the slot it appears in
    /// (y/z nodes outside the driver, v nodes in the terminal, ...).
    #[error("invalid expression in {slot}: {message}")]
    InvalidExpr { slot: String, message: String },

    #[error("point {point:?} lies outside the closed domain")]
    OutsideDomain { point: Vec<f64> },

    #[error("non-finite state on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },

    #[error("regression failed at step {step}: {message}")]
    Regression { step: usize, message: String },

    /// Cross-derivative terms dominate the diagonal; the FD stencil would
    /// lose monotonicity at this node. Refine the grid.
    #[error("non-monotone stencil at node {node}: {detail}")]
    NonMonotoneStencil { node: usize, detail: String },

    #[error("{what} exceeded the iteration cap of {cap}")]
    IterationCap { what: String, cap: usize },

    #[error("boundary node supplied where an interior node is required")]
    BoundaryNode,

    /// A check's preconditions do not hold; the check is refused rather
    /// than reported as failed.
    #[error("check refused: {0}")]
    Refused(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
