use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric kernel, the model and the training pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown class id {id} (table holds {count} classes)")]
    UnknownClass { id: usize, count: usize },
    #[error("cannot normalize a zero-norm vector in {0}")]
    ZeroNorm(&'static str),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
    #[error("insufficient data: need at least {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("class {0} has no training examples")]
    MissingClass(usize),
    #[error("infeasible task spec: {0}")]
    InfeasibleSpec(String),
    #[error("class {class} has {available} pooled examples, {requested} requested")]
    InsufficientPool { class: usize, available: usize, requested: usize },
    #[error("split is empty")]
    EmptySplit,
    #[error("non-finite training loss at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}
