use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

pub const DEFAULT_COMPILE_COMMAND: &str = "gcc -O2 -o {out} {src}";

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SandboxConfig {
    /// Shell command template with `{src}` and `{out}` placeholders.
    pub compile_command: String,
    pub time_limit_secs: f64,
    pub memory_limit_bytes: u64,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            compile_command: String::from(DEFAULT_COMPILE_COMMAND),
            time_limit_secs: 5.0,
            memory_limit_bytes: 256 << 20,
        }
    }
}

impl SandboxConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.compile_command.contains("{src}") || !self.compile_command.contains("{out}") {
            return Err(Error::Config(format!(
                "compiler template {:?} must contain {{src}} and {{out}}",
                self.compile_command
            )));
        }
        if !(self.time_limit_secs > 0.0) || self.memory_limit_bytes == 0 {
            return Err(Error::Config(String::from(
                "time and memory limits must be positive",
            )));
        }
        Ok(())
    }

    /// Substitutes the placeholders verbatim.
    pub fn render(&self, src: &str, out: &str) -> String {
        self.compile_command
            .replace("{src}", src)
            .replace("{out}", out)
    }
}

/// Where a program failed to re-execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum FailureStage {
    Compile,
    Timeout,
    Memory,
    Crash,
    Mismatch,
}

impl FailureStage {
    pub fn tag(self) -> &'static str {
        match self {
            FailureStage::Compile => "compile",
            FailureStage::Timeout => "timeout",
            FailureStage::Memory => "memory",
            FailureStage::Crash => "crash",
            FailureStage::Mismatch => "mismatch",
        }
    }
}

impl fmt::Display for FailureStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReexecOutcome {
    /// 1 on success, 0 otherwise.
    pub score: u8,
    pub stage: Option<FailureStage>,
    pub exit_code: Option<i32>,
    pub detail: String,
}

impl ReexecOutcome {
    pub fn pass(exit_code: i32) -> Self {
        ReexecOutcome {
            score: 1,
            stage: None,
            exit_code: Some(exit_code),
            detail: String::new(),
        }
    }

    pub fn fail(stage: FailureStage, detail: impl Into<String>) -> Self {
        ReexecOutcome {
            score: 0,
            stage: Some(stage),
            exit_code: None,
            detail: detail.into(),
        }
    }
}

/// Compiles and runs candidate programs. Implementations must report a
/// missing toolchain as [`Error::EnvironmentUnavailable`] rather than as a
/// zero score.
pub trait Reexecutor {
    fn sandbox(&self) -> &SandboxConfig;

    /// Checks that the toolchain is usable; returns a short description.
    fn environment(&self) -> Result<String>;

    fn reexecute(&self, src: &str, expected: Option<u8>) -> Result<ReexecOutcome>;

    /// Runs many programs; results come back in input order.
    fn reexecute_batch(&self, jobs: &[(String, Option<u8>)]) -> Vec<Result<ReexecOutcome>> {
        jobs.iter()
            .map(|(src, exp)| self.reexecute(src, *exp))
            .collect()
    }
}
