use std::path::PathBuf;

use thiserror::Error;

use crate::ctbg::NodeRef;

/// Errors produced by graph construction, model evaluation, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no interactions supplied")]
    EmptyInput,
    #[error("{kind} id {id} out of range (declared count {count})")]
    IdOutOfRange {
        kind: &'static str,
        id: usize,
        count: usize,
    },
    #[error("invalid timestamp {0}: must be finite and non-negative")]
    InvalidTimestamp(f64),
    #[error("unknown node {0:?}")]
    UnknownNode(NodeRef),
    #[error("need at least {needed} interactions, got {got}")]
    TooFewInteractions { needed: usize, got: usize },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("empty neighbor set")]
    EmptyNeighbors,
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("empty evaluation set")]
    EmptyEvaluationSet,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
