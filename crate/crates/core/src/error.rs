//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum. The CLI maps these onto its exit-code contract
/// (2 usage/config, 3 numerical abort, 4 unsupported operation).
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree with an operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value is outside an operation's domain (e.g. class index out of range).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Batch statistics requested over a population smaller than 2.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// Eval-mode normalization before any running-statistics update.
    #[error("uninitialized running statistics: {0}")]
    UninitializedStats(String),

    /// Task or element index out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// An architecture or dataset spec is invalid.
    #[error("invalid spec: {0}")]
    Spec(String),

    /// A user-supplied parameter is out of range (k, tau, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Operation not supported for this variant/mode.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Numerical abort (NaN loss, undefined correlation, ...).
    #[error("numerical abort: {0}")]
    Numeric(String),

    /// Binary file format violation, with the offending byte offset.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Configuration file rejected.
    #[error("config error: {0}")]
    Config(String),

    /// Parameter-group audit failure (a parameter in two groups, counts off).
    #[error("audit error: {0}")]
    Audit(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
