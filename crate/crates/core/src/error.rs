use thiserror::Error;

/// Errors produced by tree encoding, tree operations and the machine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid tree address 0 (addresses start at 1)")]
    InvalidAddress,

    #[error("address {index} exceeds maximum depth {max_depth}")]
    DepthOverflow { index: u64, max_depth: u32 },

    #[error("path of length {len} exceeds maximum depth {max_depth}")]
    PathTooDeep { len: usize, max_depth: u32 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("token id {0} outside vocabulary")]
    UnknownTokenId(u32),

    #[error("malformed tree: nodes {orphans:?} have no parent")]
    MalformedTree { orphans: Vec<u64> },

    #[error("role index {index} outside role space of size {size}")]
    RoleOutOfRange { index: u64, size: usize },

    #[error("parse error at {line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("bit width {width} too small for address {index}")]
    BitWidth { index: u64, width: usize },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("agent needs at least one memory slot")]
    EmptyMemory,

    #[error("cannot sample {n} distinct positions from {max_int}")]
    TooManyPositions { n: usize, max_int: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
