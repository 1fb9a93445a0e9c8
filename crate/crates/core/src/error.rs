use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {what} expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty {0} stream")]
    EmptyStream(&'static str),

    #[error("stale delta: server is at round {expected}, delta is for round {actual}")]
    StaleRound { expected: u32, actual: u32 },

    #[error("delta index {index} out of range for {global_count} global weights")]
    IndexOutOfRange { index: u32, global_count: u32 },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}
