use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid mask: row {row} has no unmasked entry")]
    InvalidMask { row: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: u32, size: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty batch: every position is padding")]
    EmptyBatch,
    #[error("non-finite value detected: {0}")]
    NonFinite(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
