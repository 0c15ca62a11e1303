//! Vocabulary files: the ordered token list plus context and mnemonic metadata.

use std::fs;
use std::path::Path;

use recode_core::Vocab;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_FORMAT: &str = "recode-vocab";
pub const VOCAB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabFile {
    pub format: String,
    pub version: u32,
    pub max_context: usize,
    pub mnemonic_source: String,
    pub tokens: Vec<String>,
}

impl VocabFile {
    pub fn from_vocab(v: &Vocab) -> Self {
        VocabFile {
            format: VOCAB_FORMAT.into(),
            version: VOCAB_VERSION,
            max_context: v.max_context(),
            mnemonic_source: v.mnemonic_source().into(),
            tokens: v.tokens(),
        }
    }

    pub fn to_vocab(&self) -> recode_core::Result<Vocab> {
        Vocab::from_tokens(&self.tokens, self.max_context, self.mnemonic_source.clone())
    }
}

pub fn save_vocab(path: &Path, v: &Vocab) -> Result<()> {
    let json = serde_json::to_string_pretty(&VocabFile::from_vocab(v)).expect("vocab serializes");
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: VocabFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.format != VOCAB_FORMAT || file.version != VOCAB_VERSION {
        return Err(Error::format(
            path,
            format!(
                "unsupported vocabulary format {} v{}",
                file.format, file.version
            ),
        ));
    }
    file.to_vocab()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Toy-dialect mnemonics plus one mnemonic per non-empty line of `path`.
pub fn vocab_with_mnemonics(path: &Path, max_context: usize) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let extra: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    Vocab::new(extra, max_context, format!("file:{}", path.display()))
        .map_err(|e| Error::format(path, e.to_string()))
}
