//! Decoder-only causal transformer backbone.
//!
//! Pre-norm blocks with learned absolute positions, multi-head causal
//! self-attention and a GELU feed-forward sublayer. All tensors are row-major
//! and multiply on the right: a projection maps `x (T x d_in)` to
//! `x * W (T x d_out)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adaptation::Projection;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Fnv, Tensor};
use crate::tokenizer::{self, Vocab};

mod generate;
mod loss;
mod transformer;

pub use generate::{
    generate, generate_scored, masked_nll, perplexity, perplexity_masked, sequence_logprob,
    Generation, Sampling, ScoredGeneration,
};
pub use loss::{clm_loss, clm_loss_with_grad, log_softmax_row};
pub use transformer::{forward, hidden_states, loss_and_grads, GradRequest, Gradients, LossMask};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    /// Residual-branch dropout, only active while training.
    pub dropout: f64,
    /// Reuse the token embedding as the output projection.
    pub tied_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: tokenizer::OPCODE_BASE as usize,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_context: tokenizer::DEFAULT_MAX_CONTEXT,
            dropout: 0.0,
            tied_head: false,
        }
    }
}

impl ModelConfig {
    /// Default architecture sized to a vocabulary.
    pub fn for_vocab(vocab: &Vocab) -> Self {
        Self {
            vocab_size: vocab.len(),
            max_context: vocab.max_context(),
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_context == 0
        {
            return bad(format!("all model dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Input and output width of a projection.
    pub fn projection_shape(&self, p: Projection) -> (usize, usize) {
        match p {
            Projection::Query | Projection::Key | Projection::Value | Projection::Output => {
                (self.d_model, self.d_model)
            }
            Projection::FfIn => (self.d_model, self.d_ff),
            Projection::FfOut => (self.d_ff, self.d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub query: Tensor,
    pub query_bias: Tensor,
    pub key: Tensor,
    pub key_bias: Tensor,
    pub value: Tensor,
    pub value_bias: Tensor,
    pub output: Tensor,
    pub output_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
}

impl LayerParams {
    pub const NAMES: [&'static str; 16] = [
        "ln1.gain",
        "ln1.bias",
        "attn.query",
        "attn.query_bias",
        "attn.key",
        "attn.key_bias",
        "attn.value",
        "attn.value_bias",
        "attn.output",
        "attn.output_bias",
        "ln2.gain",
        "ln2.bias",
        "ff.in",
        "ff.in_bias",
        "ff.out",
        "ff.out_bias",
    ];

    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let std = 0.02;
        let resid_std = std / libm::sqrt(2.0 * cfg.n_layers as f64);
        LayerParams {
            ln1_gain: Tensor::filled(1, d, 1.0),
            ln1_bias: Tensor::zeros(1, d),
            query: Tensor::randn(d, d, std, rng),
            query_bias: Tensor::zeros(1, d),
            key: Tensor::randn(d, d, std, rng),
            key_bias: Tensor::zeros(1, d),
            value: Tensor::randn(d, d, std, rng),
            value_bias: Tensor::zeros(1, d),
            output: Tensor::randn(d, d, resid_std, rng),
            output_bias: Tensor::zeros(1, d),
            ln2_gain: Tensor::filled(1, d, 1.0),
            ln2_bias: Tensor::zeros(1, d),
            ff_in: Tensor::randn(d, cfg.d_ff, std, rng),
            ff_in_bias: Tensor::zeros(1, cfg.d_ff),
            ff_out: Tensor::randn(cfg.d_ff, d, resid_std, rng),
            ff_out_bias: Tensor::zeros(1, d),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.query,
            &self.query_bias,
            &self.key,
            &self.key_bias,
            &self.value,
            &self.value_bias,
            &self.output,
            &self.output_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff_in,
            &self.ff_in_bias,
            &self.ff_out,
            &self.ff_out_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.query,
            &mut self.query_bias,
            &mut self.key,
            &mut self.key_bias,
            &mut self.value,
            &mut self.value_bias,
            &mut self.output,
            &mut self.output_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
        ]
    }

    pub fn weight(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
            Projection::Output => &self.output,
            Projection::FfIn => &self.ff_in,
            Projection::FfOut => &self.ff_out,
        }
    }

    pub fn weight_mut(&mut self, p: Projection) -> &mut Tensor {
        match p {
            Projection::Query => &mut self.query,
            Projection::Key => &mut self.key,
            Projection::Value => &mut self.value,
            Projection::Output => &mut self.output,
            Projection::FfIn => &mut self.ff_in,
            Projection::FfOut => &mut self.ff_out,
        }
    }

    pub fn bias(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Query => &self.query_bias,
            Projection::Key => &self.key_bias,
            Projection::Value => &self.value_bias,
            Projection::Output => &self.output_bias,
            Projection::FfIn => &self.ff_in_bias,
            Projection::FfOut => &self.ff_out_bias,
        }
    }
}

/// Backbone parameters. Setting `frozen` makes the trainer refuse to update
/// any of them.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// `d_model x vocab_size`; `None` when the head is tied to the embedding.
    pub head: Option<Tensor>,
    pub frozen: bool,
}

impl BackboneParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let d = config.d_model;
        let token_embedding = Tensor::randn(config.vocab_size, d, 0.02, &mut rng);
        let position_embedding = Tensor::randn(config.max_context, d, 0.01, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams::init(&config, &mut rng))
            .collect();
        let head = (!config.tied_head).then(|| Tensor::randn(d, config.vocab_size, 0.02, &mut rng));
        Ok(BackboneParams {
            token_embedding,
            position_embedding,
            layers,
            final_gain: Tensor::filled(1, d, 1.0),
            final_bias: Tensor::zeros(1, d),
            head,
            frozen: false,
            config,
        })
    }

    /// Same structure with every entry zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z.frozen = false;
        z
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push((String::from("embed.token"), &self.token_embedding));
        out.push((String::from("embed.position"), &self.position_embedding));
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push((String::from("final.gain"), &self.final_gain));
        out.push((String::from("final.bias"), &self.final_bias));
        if let Some(h) = &self.head {
            out.push((String::from("head"), h));
        }
        out
    }

    /// Mutable views in the same order as [`BackboneParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.token_embedding);
        out.push(&mut self.position_embedding);
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_named_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let expected: Vec<(String, (usize, usize))> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} backbone tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, shape)), (got_name, t)) in
            params.tensors_mut().into_iter().zip(&expected).zip(tensors)
        {
            if *name != got_name || *shape != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Order-sensitive checksum over every tensor.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for (_, t) in self.named_tensors() {
            h.write_u64(t.checksum());
        }
        h.finish()
    }

    /// Output projection as `d_model x vocab` when untied.
    pub fn head_weight(&self) -> Option<&Tensor> {
        self.head.as_ref()
    }
}
