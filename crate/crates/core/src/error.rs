use thiserror::Error;

use crate::comm::Endpoint;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite margin {0}")]
    Domain(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("cannot split {available} {what} into {parts} parts")]
    TooManyParts {
        what: &'static str,
        parts: usize,
        available: usize,
    },
    #[error("partition count must be at least 1")]
    ZeroParts,
    #[error("row index {row} out of range for dimension {d}")]
    RowOutOfRange { row: usize, d: usize },
    #[error("row indices within column {column} are not strictly increasing")]
    UnsortedColumn { column: usize },
    #[error("label count {labels} does not match column count {columns}")]
    LabelCount { labels: usize, columns: usize },
    #[error("label {0} is not -1 or +1")]
    BadLabel(f64),
    #[error("shards do not tile the matrix")]
    BadShards,
    #[error("invalid synthetic parameter: {0}")]
    Synthetic(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommError {
    #[error("contribution lengths differ: {first} vs {other}")]
    LengthMismatch { first: usize, other: usize },
    #[error("expected {expected} contributions, got {actual}")]
    WrongParticipants { expected: usize, actual: usize },
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(Endpoint),
    #[error("fabric is shut down")]
    Closed,
    #[error("collective timed out waiting on {0}")]
    Timeout(Endpoint),
    #[error("malformed frame: {0}")]
    Frame(&'static str),
    #[error("{0} aborted the run")]
    Aborted(Endpoint),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("step size must be positive and finite, got {0}")]
    StepSize(f64),
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("regularization strength must be non-negative, got {0}")]
    Lambda(f64),
    #[error("{0}")]
    Mismatch(&'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error("diverged at outer loop {t}, inner step {m}")]
    Divergence { t: usize, m: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("instance index {index} out of range for {n} instances")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("staleness bound violated: {staleness} > {bound}")]
    Staleness { staleness: usize, bound: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("only L2 regularization has analytic constants")]
    Unsupported,
    #[error("objective is not strongly convex (mu = {0})")]
    NotStronglyConvex(f64),
    #[error("step size must be positive, got {0}")]
    StepSize(f64),
    #[error("bound is undefined for this configuration (a = {0} >= 1)")]
    BoundUndefined(f64),
    #[error("optimum has {actual} coordinates, expected {expected}")]
    MissingOptimum { expected: usize, actual: usize },
    #[error("trial count must be at least 1")]
    NoTrials,
    #[error(transparent)]
    Run(#[from] RunError),
}
