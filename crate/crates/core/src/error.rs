use thiserror::Error;

/// Errors produced by planning, compilation and execution.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("compile error: {0}")]
    Compile(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("execution error at rank {rank}, instruction {index}: {message}")]
    Execution {
        rank: usize,
        index: usize,
        message: String,
    },

    #[error("deadlock: {0}")]
    Deadlock(String),

    #[error("cost model error: {0}")]
    CostModel(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
