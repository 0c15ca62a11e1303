//! Paired samples, assembly normalization and the synthetic ground-truth corpus.

use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

pub mod minilang;
pub mod normalize;
pub mod toyvm;

pub use minilang::{gen_mini_corpus, gen_mini_corpus_with, GenConfig, MiniProgram};
pub use normalize::{normalize_asm, NormalizationConfig};
pub use toyvm::run_toy_vm;

/// Translation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Task {
    #[cfg_attr(feature = "serde", serde(rename = "asm2src"))]
    AsmToSrc,
    #[cfg_attr(feature = "serde", serde(rename = "src2asm"))]
    SrcToAsm,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::AsmToSrc, Task::SrcToAsm];

    /// Wire tag used in corpus files and on the command line.
    pub fn tag(self) -> &'static str {
        match self {
            Task::AsmToSrc => "asm2src",
            Task::SrcToAsm => "src2asm",
        }
    }

    pub fn other(self) -> Task {
        match self {
            Task::AsmToSrc => Task::SrcToAsm,
            Task::SrcToAsm => Task::AsmToSrc,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asm2src" => Ok(Task::AsmToSrc),
            "src2asm" => Ok(Task::SrcToAsm),
            other => Err(Error::Config(alloc::format!("unknown task tag {other:?}"))),
        }
    }
}

/// One paired instance: the task decides which side is assembly.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Sample {
    pub id: String,
    pub task: Task,
    pub input_text: String,
    pub output_text: String,
    /// Exit code the source program should produce, when known.
    pub expected_exit: Option<u8>,
}

impl Sample {
    /// Builds a sample from a source/assembly pair, orienting it by `task`.
    pub fn from_pair(id: impl Into<String>, src: &str, asm: &str, task: Task) -> Result<Self> {
        if src.is_empty() || asm.is_empty() {
            return Err(Error::Config(
                "source and assembly text must be non-empty".into(),
            ));
        }
        let (input, output) = match task {
            Task::AsmToSrc => (asm, src),
            Task::SrcToAsm => (src, asm),
        };
        Ok(Sample {
            id: id.into(),
            task,
            input_text: input.into(),
            output_text: output.into(),
            expected_exit: None,
        })
    }

    pub fn with_expected_exit(mut self, code: Option<u8>) -> Self {
        self.expected_exit = code;
        self
    }

    pub fn source_text(&self) -> &str {
        match self.task {
            Task::AsmToSrc => &self.output_text,
            Task::SrcToAsm => &self.input_text,
        }
    }

    pub fn asm_text(&self) -> &str {
        match self.task {
            Task::AsmToSrc => &self.input_text,
            Task::SrcToAsm => &self.output_text,
        }
    }
}
