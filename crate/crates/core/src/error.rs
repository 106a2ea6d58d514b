use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("corpus contains no sentences")]
    EmptyCorpus,
    #[error("vocabulary size {requested} is below the floor of {floor} (specials + bytes)")]
    VocabTooSmall { requested: usize, floor: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    UnknownToken { id: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("conditioning does not match injection mode {0:?}")]
    ModeMismatch(crate::model::InjectionMode),
    #[error("variable is not part of the recorded graph")]
    Detached,
    #[error("empty target window")]
    EmptyTarget,
    #[error("future text is empty")]
    EmptyFuture,
    #[error("non-finite loss {loss} on example {example}")]
    NonFiniteLoss { loss: f64, example: String },
    #[error("not enough samples: need {need}, have {have}")]
    InsufficientSamples { need: usize, have: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
