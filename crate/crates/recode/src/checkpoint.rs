//! Binary checkpoint container shared by backbones and adaptation states.
//!
//! Layout: 8-byte magic, little-endian `u32` version, little-endian `u64`
//! header length, a JSON header, then every tensor's entries as
//! little-endian `f64` in header order. Values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use recode_core::adaptation::AdaptationConfig;
use recode_core::{AdaptationState, BackboneParams, ModelConfig, Strategy, Task, Tensor, Vocab};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab_io::VocabFile;

pub const MAGIC: &[u8; 8] = b"RECODECK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Backbone,
    Adaptation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationMeta {
    pub strategy: Strategy,
    pub tasks: Vec<Task>,
    pub active_task: Task,
    pub config: AdaptationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: Kind,
    /// The backbone architecture; for adaptation files, the one it was trained on.
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<VocabFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptation: Option<AdaptationMeta>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneCheckpoint {
    pub params: BackboneParams,
    pub vocab: Vocab,
}

pub fn encode(header: &Header, tensors: &[&Tensor]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let n: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a recode checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(bad("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    let mut data = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n = e
            .rows
            .checked_mul(e.cols)
            .ok_or_else(|| bad(format!("tensor {} is too large", e.name)))?;
        if data.len() < 8 * n {
            return Err(bad(format!("truncated data for tensor {}", e.name)));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[8 * n..];
        tensors.push((e.name.clone(), Tensor::from_vec(e.rows, e.cols, values)?));
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    Ok((header, tensors))
}

fn entries<'a>(named: &[(String, &'a Tensor)]) -> (Vec<TensorEntry>, Vec<&'a Tensor>) {
    named
        .iter()
        .map(|(name, t)| {
            (
                TensorEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                },
                *t,
            )
        })
        .unzip()
}

fn read(path: &Path, kind: Kind) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors) = decode(&bytes, path)?;
    if header.kind != kind {
        return Err(Error::format(
            path,
            format!("expected a {kind:?} checkpoint, found {:?}", header.kind).to_lowercase(),
        ));
    }
    Ok((header, tensors))
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn backbone_bytes(params: &BackboneParams, vocab: &Vocab) -> Vec<u8> {
    let (tensors, data) = entries(&params.named_tensors());
    let header = Header {
        kind: Kind::Backbone,
        model: params.config.clone(),
        vocab: Some(VocabFile::from_vocab(vocab)),
        adaptation: None,
        tensors,
    };
    encode(&header, &data)
}

pub fn save_backbone(path: &Path, params: &BackboneParams, vocab: &Vocab) -> Result<()> {
    write(path, backbone_bytes(params, vocab))
}

pub fn load_backbone(path: &Path) -> Result<BackboneCheckpoint> {
    let (header, tensors) = read(path, Kind::Backbone)?;
    let vocab = header
        .vocab
        .ok_or_else(|| Error::format(path, "backbone checkpoint carries no vocabulary"))?
        .to_vocab()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if vocab.len() != header.model.vocab_size || vocab.max_context() != header.model.max_context {
        return Err(Error::format(
            path,
            "stored vocabulary does not match the model configuration",
        ));
    }
    let params = BackboneParams::from_named_tensors(header.model, tensors)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(BackboneCheckpoint { params, vocab })
}

pub fn adaptation_bytes(
    state: &AdaptationState,
    cfg: &AdaptationConfig,
    model: &ModelConfig,
) -> Vec<u8> {
    let (tensors, data) = entries(&state.named_tensors());
    let header = Header {
        kind: Kind::Adaptation,
        model: model.clone(),
        vocab: None,
        adaptation: Some(AdaptationMeta {
            strategy: state.strategy,
            tasks: state.tasks(),
            active_task: state.active_task,
            config: cfg.clone(),
        }),
        tensors,
    };
    encode(&header, &data)
}

pub fn save_adaptation(
    path: &Path,
    state: &AdaptationState,
    cfg: &AdaptationConfig,
    model: &ModelConfig,
) -> Result<()> {
    write(path, adaptation_bytes(state, cfg, model))
}

/// Loads an adaptation state for `backbone`, refusing any architecture mismatch.
pub fn load_adaptation(
    path: &Path,
    backbone: &BackboneParams,
) -> Result<(AdaptationState, AdaptationConfig)> {
    let (header, tensors) = read(path, Kind::Adaptation)?;
    let meta = header
        .adaptation
        .ok_or_else(|| Error::format(path, "adaptation checkpoint carries no metadata"))?;
    let (a, b) = (&header.model, &backbone.config);
    for (what, x, y) in [
        ("d_model", a.d_model, b.d_model),
        ("n_layers", a.n_layers, b.n_layers),
        ("n_heads", a.n_heads, b.n_heads),
        ("d_ff", a.d_ff, b.d_ff),
        ("vocab_size", a.vocab_size, b.vocab_size),
        ("max_context", a.max_context, b.max_context),
    ] {
        if x != y {
            return Err(Error::format(
                path,
                format!("{what} mismatch: adaptation was trained for {x}, backbone has {y}"),
            ));
        }
    }
    let state =
        AdaptationState::from_named_tensors(&meta.config, backbone, meta.active_task, tensors)
            .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((state, meta.config))
}
