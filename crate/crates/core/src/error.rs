use thiserror::Error;

/// Errors raised anywhere in the planning, simulation and learning stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("vertices {from} and {to} are not adjacent")]
    InvalidEdge { from: usize, to: usize },
    #[error("goal {goal} is unreachable from {start} within {horizon} time steps")]
    UnreachableGoal {
        start: usize,
        goal: usize,
        horizon: usize,
    },
    #[error("invalid path matrix: {0}")]
    InvalidPath(String),
    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),
    #[error("no solvable level for seed {seed} after {draws} draws")]
    GenerationFailure { seed: u64, draws: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("oracle inconsistency: {0}")]
    OracleInconsistency(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;
