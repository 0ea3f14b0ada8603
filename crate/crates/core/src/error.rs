use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate symbol {0:?} in alphabet")]
    DuplicateSymbol(String),
    #[error("tokenizer kind mismatch: expected {expected}, got {got}")]
    KindMismatch { expected: &'static str, got: String },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("unknown modality {0:?}")]
    UnknownModality(String),
    #[error("alignment violated in sample {sample:?}: modality {modality:?} has length {got}, anchor has {expected}")]
    Misaligned {
        sample: String,
        modality: String,
        expected: usize,
        got: usize,
    },
    #[error("layout of {total} tokens exceeds budget {budget}")]
    OverBudget { total: usize, budget: usize },
    #[error("non-finite value in {where_}")]
    NonFinite { where_: String },
    #[error("sample skipped: {0}")]
    Skip(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed dot-bracket at index {index}: {reason}")]
    DotBracket { index: usize, reason: &'static str },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
