use thiserror::Error;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("value block of length {len} does not fill a {rows}x{cols} shape")]
    BadBlock { len: usize, rows: usize, cols: usize },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: expected {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("gradient requested for a non-scalar output of shape {0:?}")]
    NonScalarOutput((usize, usize)),

    #[error("node {index} does not belong to this graph (length {len})")]
    UnknownNode { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
