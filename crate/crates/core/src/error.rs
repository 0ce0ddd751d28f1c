//! Error type shared by the tape, layers, and data parsers.

use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unknown primitive kind `{0}`")]
    UnknownPrimitive(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called twice without resetting the tape")]
    BackwardWithoutReset,

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// Near-parallel (or zero) vector pair where an angle-based quantity is
    /// undefined; callers treat this as a skipped case, not a failure.
    #[error("degenerate vector pair: |sin theta| below threshold")]
    DegeneratePair,

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn invalid(msg: impl core::fmt::Display) -> Self {
        Error::Invalid(alloc::format!("{msg}"))
    }
}

pub type Result<T> = core::result::Result<T, Error>;
