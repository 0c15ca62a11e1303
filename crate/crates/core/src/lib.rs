//! Core of the `recode` toolkit: bidirectional assembly/source translation with a
//! small causal decoder, parameter-efficient task adaptation and a three-axis
//! evaluation protocol.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO. File formats,
//! the compiler sandbox and the command-line front end live in the `recode`
//! crate.
//!
//! Layout:
//! - [`corpus`]: paired samples, assembly normalization, the synthetic
//!   mini-language corpus and the reference toy VM.
//! - [`tokenizer`]: hybrid opcode + byte vocabulary and the context-length filter.
//! - [`model`]: decoder backbone, forward/backward passes, loss, generation.
//! - [`adaptation`]: residual adapters, LoRA deltas and task prefixes.
//! - [`train`]: AdamW and the pretraining / fine-tuning loops.
//! - [`eval`]: edit and semantic similarity, re-executability plumbing, reports.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod adaptation;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use adaptation::{
    AdaptationState, AdapterParams, LoraParams, PrefixEmbedding, Projection, Strategy,
};
pub use corpus::{NormalizationConfig, Sample, Task};
pub use error::{Error, Result};
pub use model::{BackboneParams, ModelConfig};
pub use tensor::Tensor;
pub use tokenizer::{Role, TokenStream, Vocab};
