//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]; panics are
//! reserved for internal invariant violations (indexing bugs), never for
//! bad caller input.

use thiserror::Error;

/// Errors produced by tensor ops, codecs, models and I/O in this crate.
#[derive(Debug, Error)]
pub enum SeqPeError {
    /// Elementwise / matmul operands whose shapes cannot be combined.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An op that needs a particular rank or dimension got something else.
    #[error("{op}: bad shape {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// `backward` was called on a non-scalar tensor.
    #[error("backward: tensor has {numel} elements, expected a scalar")]
    NotScalar { numel: usize },

    /// A coordinate lies outside the representable digit range.
    #[error("position {value} out of range for base {base} with {digits} digits (max {max})")]
    PositionOutOfRange {
        value: i64,
        base: u32,
        digits: usize,
        max: i64,
    },

    /// A position had the wrong number of coordinates for the codec.
    #[error("position has {got} coordinates, codec expects {expected}")]
    DimMismatch { expected: usize, got: usize },

    /// A token id fell outside the embedding table.
    #[error("{what}: token id {id} out of range (table has {rows} rows)")]
    TokenOutOfRange {
        what: &'static str,
        id: usize,
        rows: usize,
    },

    /// Sampling was asked for more distinct items than the region holds.
    #[error("cannot draw {wanted} distinct items from a region of {available}")]
    RegionTooSmall { wanted: usize, available: usize },

    /// Config fields that don't describe a usable model or run.
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    /// Head-count / width combinations that don't divide evenly.
    #[error("{what}: width {width} not divisible by {parts} parts")]
    UnevenSplit {
        what: &'static str,
        width: usize,
        parts: usize,
    },

    /// Sequence longer than what the positional scheme can address.
    #[error("context of length {len} exceeds maximum {max} for {scheme}")]
    ContextTooLong {
        scheme: &'static str,
        len: usize,
        max: usize,
    },

    /// An evaluation extent the position-encoding source cannot serve
    /// (e.g. a precomputed table asked for positions outside its region).
    #[error("unsupported extent: {0}")]
    UnsupportedExtent(String),

    /// Checkpoint / table container parse failures.
    #[error("container format error: {0}")]
    ContainerFormat(String),

    /// Checkpoint metadata that doesn't match the running config.
    #[error("container mismatch: {0}")]
    ContainerMismatch(String),

    /// A named parameter was registered twice or looked up and missing.
    #[error("parameter registry: {0}")]
    ParamRegistry(String),

    /// Corpus / dataset construction problems.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Numeric failure worth surfacing (NaN loss, ill-posed request).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SeqPeError>;
