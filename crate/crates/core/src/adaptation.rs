//! Task adaptation on top of a frozen backbone.
//!
//! Three kinds of trainable parameters stack on the backbone:
//! - residual bottleneck adapters, one per task (Multi-Adapter strategy):
//!   `h' = h + relu(h * down) * up`, placed on the output of every block's
//!   feed-forward sublayer before it joins the residual stream;
//! - LoRA factor pairs on the query/key/value/output and both feed-forward
//!   projections (either strategy): `x * W + (alpha / r) * (x * down) * up`;
//! - learned prefix embeddings, one per task (Seq2Seq Unified strategy), that
//!   replace the embedding of the task's prefix token in the input.
//!
//! `up` factors start at zero, and prefixes start as a copy of the prefix
//! token's embedding, so a fresh state leaves the backbone function unchanged.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::model::{BackboneParams, ModelConfig};
use crate::rng;
use crate::tensor::{axpy, matmul_acc, Fnv, Tensor};
use crate::tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Strategy {
    #[cfg_attr(feature = "serde", serde(rename = "ma"))]
    MultiAdapter,
    #[cfg_attr(feature = "serde", serde(rename = "s2s"))]
    Seq2SeqUnified,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::MultiAdapter => "ma",
            Strategy::Seq2SeqUnified => "s2s",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl core::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ma" => Ok(Strategy::MultiAdapter),
            "s2s" => Ok(Strategy::Seq2SeqUnified),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Projections that carry LoRA factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    FfIn,
    FfOut,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::FfIn,
        Projection::FfOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
            Projection::FfIn => "ff_in",
            Projection::FfOut => "ff_out",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    /// `d_model x rank`
    pub down: Tensor,
    /// `rank x d_model`
    pub up: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub task: Task,
    pub rank: usize,
    pub layers: Vec<AdapterLayer>,
}

impl AdapterParams {
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for l in &self.layers {
            h.write_u64(l.down.checksum());
            h.write_u64(l.up.checksum());
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `d_in x rank`
    pub down: Tensor,
    /// `rank x d_out`
    pub up: Tensor,
}

impl LoraPair {
    /// The dense `d_in x d_out` update `scaling * down * up`.
    pub fn delta(&self, scaling: f64) -> Tensor {
        let mut d = self
            .down
            .matmul(&self.up)
            .expect("factor shapes are validated on construction");
        d.data_mut().iter_mut().for_each(|v| *v *= scaling);
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams {
    pub rank: usize,
    pub alpha: f64,
    /// Per layer, one pair per [`Projection`] in `Projection::ALL` order.
    pub layers: Vec<Vec<LoraPair>>,
}

impl LoraParams {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn pair(&self, layer: usize, p: Projection) -> &LoraPair {
        &self.layers[layer][p.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixEmbedding {
    pub task: Task,
    /// `n_prefix x d_model`
    pub vectors: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdaptationConfig {
    pub strategy: Strategy,
    pub tasks: Vec<Task>,
    pub adapter_rank: usize,
    /// `None` disables LoRA.
    pub lora_rank: Option<usize>,
    /// Defaults to the rank, giving a scaling of 1.
    pub lora_alpha: Option<f64>,
    pub n_prefix: usize,
    pub init_std: f64,
}

impl AdaptationConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            tasks: Task::ALL.to_vec(),
            adapter_rank: 8,
            lora_rank: Some(4),
            lora_alpha: None,
            n_prefix: 1,
            init_std: 0.02,
        }
    }
}

/// Everything trainable during fine-tuning plus the routing selection.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationState {
    pub strategy: Strategy,
    pub adapters: BTreeMap<Task, AdapterParams>,
    pub lora: Option<LoraParams>,
    pub prefixes: BTreeMap<Task, PrefixEmbedding>,
    pub active_task: Task,
    /// Convex weights over task adapters; when set, overrides `active_task`
    /// for adapter routing. Inference only.
    pub mixing: Option<BTreeMap<Task, f64>>,
}

impl AdaptationState {
    /// Fresh state whose adapted forward pass equals the bare backbone.
    pub fn new(cfg: &AdaptationConfig, backbone: &BackboneParams, seed: u64) -> Result<Self> {
        let mc = &backbone.config;
        let d = mc.d_model;
        if cfg.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut rng = rng::seeded(seed);
        let mut adapters = BTreeMap::new();
        let mut prefixes = BTreeMap::new();
        match cfg.strategy {
            Strategy::MultiAdapter => {
                if cfg.adapter_rank == 0 || cfg.adapter_rank >= d {
                    return Err(Error::Config(format!(
                        "adapter rank {} must satisfy 0 < r < d_model = {d}",
                        cfg.adapter_rank
                    )));
                }
                for &task in &cfg.tasks {
                    let layers = (0..mc.n_layers)
                        .map(|_| AdapterLayer {
                            down: Tensor::randn(d, cfg.adapter_rank, cfg.init_std, &mut rng),
                            up: Tensor::zeros(cfg.adapter_rank, d),
                        })
                        .collect();
                    adapters.insert(
                        task,
                        AdapterParams {
                            task,
                            rank: cfg.adapter_rank,
                            layers,
                        },
                    );
                }
            }
            Strategy::Seq2SeqUnified => {
                if cfg.n_prefix == 0 {
                    return Err(Error::Config("n_prefix must be at least 1".into()));
                }
                for &task in &cfg.tasks {
                    let id = tokenizer::prefix_token(task) as usize;
                    if id >= mc.vocab_size {
                        return Err(Error::Config("vocabulary has no prefix tokens".into()));
                    }
                    let row = backbone.token_embedding.row(id);
                    let mut vectors = Tensor::zeros(cfg.n_prefix, d);
                    for k in 0..cfg.n_prefix {
                        vectors.row_mut(k).copy_from_slice(row);
                    }
                    prefixes.insert(task, PrefixEmbedding { task, vectors });
                }
            }
        }
        let lora = match cfg.lora_rank {
            None => None,
            Some(r) => {
                if r == 0 || r >= d {
                    return Err(Error::Config(format!(
                        "LoRA rank {r} must satisfy 0 < r < d_model = {d}"
                    )));
                }
                let layers = (0..mc.n_layers)
                    .map(|_| {
                        Projection::ALL
                            .iter()
                            .map(|&p| {
                                let (d_in, d_out) = mc.projection_shape(p);
                                LoraPair {
                                    down: Tensor::randn(
                                        d_in,
                                        r,
                                        1.0 / libm::sqrt(d_in as f64),
                                        &mut rng,
                                    ),
                                    up: Tensor::zeros(r, d_out),
                                }
                            })
                            .collect()
                    })
                    .collect();
                Some(LoraParams {
                    rank: r,
                    alpha: cfg.lora_alpha.unwrap_or(r as f64),
                    layers,
                })
            }
        };
        Ok(AdaptationState {
            strategy: cfg.strategy,
            adapters,
            lora,
            prefixes,
            active_task: cfg.tasks[0],
            mixing: None,
        })
    }

    pub fn tasks(&self) -> Vec<Task> {
        match self.strategy {
            Strategy::MultiAdapter => self.adapters.keys().copied().collect(),
            Strategy::Seq2SeqUnified => self.prefixes.keys().copied().collect(),
        }
    }

    pub fn has_task(&self, task: Task) -> bool {
        match self.strategy {
            Strategy::MultiAdapter => self.adapters.contains_key(&task),
            Strategy::Seq2SeqUnified => self.prefixes.contains_key(&task),
        }
    }

    /// Copy with `task` active. Parameter values are untouched.
    pub fn select_task(&self, task: Task) -> Result<Self> {
        if !self.has_task(task) {
            return Err(Error::UnknownTask(task));
        }
        let mut s = self.clone();
        s.active_task = task;
        Ok(s)
    }

    /// In-place variant of [`AdaptationState::select_task`].
    pub fn set_active_task(&mut self, task: Task) -> Result<()> {
        if !self.has_task(task) {
            return Err(Error::UnknownTask(task));
        }
        self.active_task = task;
        Ok(())
    }

    /// Enables convex adapter mixing (Multi-Adapter only).
    pub fn set_mixing(&mut self, weights: BTreeMap<Task, f64>) -> Result<()> {
        if self.strategy != Strategy::MultiAdapter {
            return Err(Error::Config(
                "adapter mixing needs the multi-adapter strategy".into(),
            ));
        }
        let total: f64 = weights.values().sum();
        if weights.values().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "mixing weights must be non-negative and sum to 1".into(),
            ));
        }
        if let Some(t) = weights.keys().find(|t| !self.adapters.contains_key(t)) {
            return Err(Error::UnknownTask(*t));
        }
        self.mixing = Some(weights);
        Ok(())
    }

    /// Number of task prefix tokens in the sequence layout. Multi-adapter
    /// sequences carry a single prefix token that acts as a plain marker.
    pub fn n_prefix(&self) -> usize {
        self.prefixes
            .values()
            .next()
            .map_or(1, |p| p.vectors.rows())
    }

    /// Adapters applied at every layer, with their weights.
    pub(crate) fn adapter_route(&self) -> Vec<(f64, &AdapterParams)> {
        if self.strategy != Strategy::MultiAdapter {
            return Vec::new();
        }
        match &self.mixing {
            Some(w) => w
                .iter()
                .filter(|(_, w)| **w > 0.0)
                .filter_map(|(t, w)| self.adapters.get(t).map(|a| (*w, a)))
                .collect(),
            None => self
                .adapters
                .get(&self.active_task)
                .map(|a| vec![(1.0, a)])
                .unwrap_or_default(),
        }
    }

    /// Checks every tensor against the backbone architecture.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let mismatch = |what: String| Err(Error::Shape(what));
        for a in self.adapters.values() {
            if a.layers.len() != cfg.n_layers {
                return mismatch(format!(
                    "adapter {} has {} layers, backbone has {}",
                    a.task,
                    a.layers.len(),
                    cfg.n_layers
                ));
            }
            for l in &a.layers {
                if l.down.shape() != (d, a.rank) || l.up.shape() != (a.rank, d) {
                    return mismatch(format!("adapter {} does not fit d_model {d}", a.task));
                }
            }
        }
        if let Some(lora) = &self.lora {
            if lora.layers.len() != cfg.n_layers {
                return mismatch(format!(
                    "LoRA has {} layers, backbone has {}",
                    lora.layers.len(),
                    cfg.n_layers
                ));
            }
            for pairs in &lora.layers {
                if pairs.len() != Projection::ALL.len() {
                    return mismatch("LoRA layer must carry one pair per projection".into());
                }
                for (p, pair) in Projection::ALL.iter().zip(pairs) {
                    let (i, o) = cfg.projection_shape(*p);
                    if pair.down.shape() != (i, lora.rank) || pair.up.shape() != (lora.rank, o) {
                        return mismatch(format!(
                            "LoRA {} pair does not fit the backbone",
                            p.name()
                        ));
                    }
                }
            }
        }
        for p in self.prefixes.values() {
            if p.vectors.cols() != d {
                return mismatch(format!("prefix width {} != d_model {d}", p.vectors.cols()));
            }
        }
        match self.strategy {
            Strategy::MultiAdapter if !self.prefixes.is_empty() => {
                mismatch("multi-adapter state carries prefixes".into())
            }
            Strategy::Seq2SeqUnified if !self.adapters.is_empty() => {
                mismatch("seq2seq state carries adapters".into())
            }
            _ => Ok(()),
        }
    }

    /// Structure-preserving zero copy, used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (task, a) in &self.adapters {
            for (i, l) in a.layers.iter().enumerate() {
                out.push((format!("adapter.{task}.layer{i}.down"), &l.down));
                out.push((format!("adapter.{task}.layer{i}.up"), &l.up));
            }
        }
        if let Some(lora) = &self.lora {
            for (i, pairs) in lora.layers.iter().enumerate() {
                for (p, pair) in Projection::ALL.iter().zip(pairs) {
                    out.push((format!("lora.layer{i}.{}.down", p.name()), &pair.down));
                    out.push((format!("lora.layer{i}.{}.up", p.name()), &pair.up));
                }
            }
        }
        for (task, p) in &self.prefixes {
            out.push((format!("prefix.{task}"), &p.vectors));
        }
        out
    }

    /// Mutable views in [`AdaptationState::named_tensors`] order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (task, a) in &mut self.adapters {
            for (i, l) in a.layers.iter_mut().enumerate() {
                out.push((format!("adapter.{task}.layer{i}.down"), &mut l.down));
                out.push((format!("adapter.{task}.layer{i}.up"), &mut l.up));
            }
        }
        if let Some(lora) = &mut self.lora {
            for (i, pairs) in lora.layers.iter_mut().enumerate() {
                for (p, pair) in Projection::ALL.iter().zip(pairs.iter_mut()) {
                    out.push((format!("lora.layer{i}.{}.down", p.name()), &mut pair.down));
                    out.push((format!("lora.layer{i}.{}.up", p.name()), &mut pair.up));
                }
            }
        }
        for (task, p) in &mut self.prefixes {
            out.push((format!("prefix.{task}"), &mut p.vectors));
        }
        out
    }

    /// Rebuilds a state for `backbone` from stored tensors. Names and shapes
    /// must match what `cfg` produces exactly.
    pub fn from_named_tensors(
        cfg: &AdaptationConfig,
        backbone: &BackboneParams,
        active_task: Task,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut st = Self::new(cfg, backbone, 0)?;
        st.set_active_task(active_task)?;
        let slots = st.named_tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} adaptation tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((name, slot), (got_name, t)) in slots.into_iter().zip(tensors) {
            if name != got_name || slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor {got_name} {:?} does not match expected {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(st)
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for (_, t) in self.named_tensors() {
            h.write_u64(t.checksum());
        }
        h.finish()
    }
}

/// `h + relu(h * down) * up` for one layer of an adapter.
pub fn adapter_apply(h: &[f64], adapter: &AdapterParams, layer: usize) -> Result<Vec<f64>> {
    let l = adapter
        .layers
        .get(layer)
        .ok_or_else(|| Error::Config(format!("adapter has no layer {layer}")))?;
    let (d, r) = l.down.shape();
    if h.len() != d || l.up.shape() != (r, d) {
        return Err(Error::Shape(format!(
            "vector of {} against adapter of width {d}",
            h.len()
        )));
    }
    let mut hidden = vec![0.0; r];
    matmul_acc(h, 1, d, l.down.data(), r, &mut hidden);
    let mut out = h.to_vec();
    for (k, a) in hidden.iter().enumerate() {
        if *a > 0.0 {
            axpy(*a, l.up.row(k), &mut out);
        }
    }
    Ok(out)
}

/// `x * base + scaling * (x * down) * up`, leaving `base` untouched.
pub fn lora_apply(x: &[f64], base: &Tensor, pair: &LoraPair, scaling: f64) -> Result<Vec<f64>> {
    let (d_in, d_out) = base.shape();
    let r = pair.down.cols();
    if x.len() != d_in || pair.down.shape() != (d_in, r) || pair.up.shape() != (r, d_out) {
        return Err(Error::Shape(format!(
            "x of {} with base {:?}, down {:?}, up {:?}",
            x.len(),
            base.shape(),
            pair.down.shape(),
            pair.up.shape()
        )));
    }
    let mut y = vec![0.0; d_out];
    matmul_acc(x, 1, d_in, base.data(), d_out, &mut y);
    let mut u = vec![0.0; r];
    matmul_acc(x, 1, d_in, pair.down.data(), r, &mut u);
    for (k, uk) in u.iter().enumerate() {
        axpy(scaling * uk, pair.up.row(k), &mut y);
    }
    Ok(y)
}

/// Folds the LoRA deltas into a copy of the backbone. Merging the same
/// deltas twice adds them twice.
pub fn lora_merge(base: &BackboneParams, lora: &LoraParams) -> Result<BackboneParams> {
    if lora.layers.len() != base.layers.len() {
        return Err(Error::Shape(format!(
            "LoRA has {} layers, backbone has {}",
            lora.layers.len(),
            base.layers.len()
        )));
    }
    let mut merged = base.clone();
    let scaling = lora.scaling();
    for (layer, pairs) in merged.layers.iter_mut().zip(&lora.layers) {
        for (p, pair) in Projection::ALL.iter().zip(pairs) {
            let w = layer.weight_mut(*p);
            if pair.down.rows() != w.rows() || pair.up.cols() != w.cols() {
                return Err(Error::Shape(format!(
                    "LoRA {} pair does not fit {:?}",
                    p.name(),
                    w.shape()
                )));
            }
            w.add_scaled(&pair.delta(scaling), 1.0)?;
        }
    }
    Ok(merged)
}
