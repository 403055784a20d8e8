use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("network construction failed: {0}")]
    Network(String),

    #[error("unknown location {0}")]
    UnknownLocation(u64),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    /// A state the simulator must never reach if feasibility is sound.
    #[error("simulation integrity failure: {0}")]
    Integrity(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("assignment solver: {0}")]
    Solver(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("replay memory: {0}")]
    Replay(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
