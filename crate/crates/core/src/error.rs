use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading or partitioning a dataset.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: feature index {index} does not increase (previous {previous})")]
    NonIncreasingIndex { line: usize, index: usize, previous: usize },
    #[error("line {line}: label {label} is not covered by the label map")]
    UnmappedLabel { line: usize, label: f64 },
    #[error("feature index {index} exceeds configured dimension {dim}")]
    DimensionTooSmall { index: usize, dim: usize },
    #[error("cannot split {instances} instances across {workers} workers")]
    TooManyWorkers { instances: usize, workers: usize },
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Failures raised by a collective operation.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum CommError {
    #[error("allreduce {rendezvous}: worker {rank} sent {got} values, expected {expected}")]
    LengthMismatch {
        rendezvous: u64,
        rank: usize,
        expected: usize,
        got: usize,
    },
    #[error("worker {rank} is at rendezvous {got}, expected {expected}")]
    RendezvousMismatch { rank: usize, expected: u64, got: u64 },
    #[error("worker {0} left the communicator")]
    PeerDeparted(usize),
    #[error("timed out waiting at rendezvous {0}")]
    Timeout(u64),
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed frame: {0}")]
    Frame(String),
}

impl From<io::Error> for CommError {
    fn from(err: io::Error) -> Self {
        match err.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => CommError::Transport(format!("timeout: {err}")),
            _ => CommError::Transport(err.to_string()),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("subproblem solver failed: psi grew to {psi:e} (cap {cap:e}) without sufficient decrease")]
    PsiEscalation { psi: f64, cap: f64 },
    #[error("line search exceeded {0} backtracks")]
    BacktrackLimit(usize),
    #[error("non-descent direction at iteration {iter}: delta = {delta:e}")]
    NonDescent { iter: usize, delta: f64 },
    #[error("worker iterates diverged: {0}")]
    Replication(String),
    #[error("internal: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
