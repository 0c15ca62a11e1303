//! Run configuration files (TOML or JSON). Command-line flags override file
//! values, which override built-in defaults.

use std::fs;
use std::path::Path;

use recode_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub dropout: Option<f64>,
    pub tied_head: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationSection {
    pub adapter_rank: Option<usize>,
    /// 0 disables LoRA.
    pub lora_rank: Option<usize>,
    pub lora_alpha: Option<f64>,
    pub n_prefix: Option<usize>,
    pub init_std: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeSection {
    pub enabled: Option<bool>,
    pub canonicalize: Option<bool>,
    pub rename_registers: Option<bool>,
    pub randomize_addresses: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    /// Missing keys take the trainer defaults.
    pub train: TrainConfig,
    pub adaptation: AdaptationSection,
    pub normalize: NormalizeSection,
}

impl FileConfig {
    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
        }
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
