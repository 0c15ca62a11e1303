use alloc::string::String;

use crate::corpus::toyvm::VmError;
use crate::corpus::Task;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("sequence of {len} tokens exceeds the {max}-token context window")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {id} is out of range for a vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("every position is masked out of the loss")]
    AllMasked,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("task {0} has no adapter or prefix in this adaptation state")]
    UnknownTask(Task),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("backbone is frozen")]
    FrozenBackbone,
    #[error("empty input after tokenization")]
    EmptyInput,
    #[error("environment unavailable: {0}")]
    EnvironmentUnavailable(String),
    #[error("mini-language: {0}")]
    Parse(String),
    #[error(transparent)]
    Vm(#[from] VmError),
}
