//! File formats, the compiler sandbox and the command-line front end for
//! [`recode_core`].
//!
//! - [`jsonl`]: paired-sample corpora.
//! - [`vocab_io`], [`checkpoint`]: vocabulary files and the binary checkpoint container.
//! - [`sandbox`]: [`sandbox::GccSandbox`], the process-level re-execution backend.
//! - [`report_io`], [`manifest`]: evaluation reports, loss histories and run manifests.
//! - [`config`]: TOML/JSON run configuration.
//! - [`cli`]: the `recode` tool.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod jsonl;
pub mod manifest;
pub mod pipeline;
pub mod report_io;
pub mod sandbox;
pub mod vocab_io;

pub use error::{Error, Result};
pub use recode_core as core;
