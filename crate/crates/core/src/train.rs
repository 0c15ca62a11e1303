//! AdamW and the two training loops.
//!
//! One optimizer step consumes `batch_size * grad_accum_steps` sequences.
//! Every sequence contributes its own mean token loss, and the step gradient
//! is the average over sequences, so splitting a batch into accumulated
//! micro-batches does not change the update. Sequences are drawn in a seeded
//! shuffled order that is redrawn at every epoch boundary. Summation order is
//! fixed, so runs are bit-reproducible.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adaptation::AdaptationState;
use crate::corpus::{Sample, Task};
use crate::error::{Error, Result};
use crate::model::{loss_and_grads, BackboneParams, GradRequest, Gradients, LossMask};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::tokenizer::{self, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Trainable {
    FullBackbone,
    AdaptationOnly,
}

/// Order in which the adaptation levels are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Schedule {
    /// Adapters or prefixes and LoRA factors together.
    Joint,
    /// First half of the steps on adapters/prefixes, second half on LoRA.
    AdaptersFirst,
    /// First half on LoRA, second half on adapters/prefixes.
    LoraFirst,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub trainable: Trainable,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps; 0 keeps the rate constant.
    pub warmup_steps: usize,
    /// Global gradient-norm clip.
    pub max_grad_norm: Option<f64>,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            grad_accum_steps: 8,
            learning_rate: 2e-4,
            max_steps: 1000,
            weight_decay: 0.0,
            seed: 0,
            trainable: Trainable::FullBackbone,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            max_grad_norm: None,
            schedule: Schedule::Joint,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return bad(format!(
                "batch size {} and accumulation {} must be positive",
                self.batch_size, self.grad_accum_steps
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad(String::from(
                "betas must lie in [0, 1) and eps must be positive",
            ));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return bad(format!("max grad norm {n} must be positive"));
            }
        }
        Ok(())
    }

    /// Learning rate at 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig, step: usize) -> Self {
        AdamW {
            lr: cfg.lr_at(step),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        OptState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction. Tensors whose
/// `active` flag is false are left untouched, moments included.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    active: &[bool],
    state: &mut OptState,
    opt: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != active.len()
    {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - libm::pow(opt.beta1, state.step as f64);
    let bc2 = 1.0 - libm::pow(opt.beta2, state.step as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !active[i] {
            continue;
        }
        if p.shape() != g.shape() || state.m[i].shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= opt.lr * opt.weight_decay * *w;
            *w -= opt.lr * mhat / (libm::sqrt(vhat) + opt.eps);
        }
    }
    Ok(())
}

struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let mut order: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut rng, &mut order);
        Batcher { order, pos: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            rng::shuffle(&mut self.rng, &mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn dropout_seed(cfg: &TrainConfig, step: usize, k: usize) -> u64 {
    cfg.seed
        ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (k as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

fn clip(grads: &mut Gradients, cfg: &TrainConfig) {
    if let Some(max) = cfg.max_grad_norm {
        let norm = libm::sqrt(grads.sum_sq());
        if norm > max {
            grads.scale(max / norm);
        }
    }
}

fn finite_or_abort(loss: f64, step: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: format!("{what} produced loss {loss}"),
        })
    }
}

/// Causal LM pretraining over `corpus`, with a callback after every step.
pub fn pretrain_clm_with(
    params: &BackboneParams,
    corpus: &[Vec<u32>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &BackboneParams),
) -> Result<(BackboneParams, Vec<StepRecord>)> {
    cfg.validate()?;
    if cfg.trainable != Trainable::FullBackbone || params.frozen {
        return Err(Error::FrozenBackbone);
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for seq in corpus {
        if seq.len() > params.config.max_context {
            return Err(Error::ContextOverflow {
                len: seq.len(),
                max: params.config.max_context,
            });
        }
        if seq.len() < 2 {
            return Err(Error::Config(String::from(
                "pretraining sequences need at least two tokens",
            )));
        }
    }
    let mut params = params.clone();
    let mut opt = OptState::new(params.named_tensors().into_iter().map(|(_, t)| t));
    let mut batcher = Batcher::new(corpus.len(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.max_steps);
    let n = cfg.effective_batch();
    let weight = 1.0 / n as f64;
    for step in 1..=cfg.max_steps {
        let req = GradRequest {
            backbone: true,
            adaptation: false,
            dropout_seed: None,
        };
        let mut grads = Gradients::zeros(&params, None, &req);
        let mut total = 0.0;
        for k in 0..n {
            let req = GradRequest {
                dropout_seed: Some(dropout_seed(cfg, step, k)),
                ..req
            };
            let seq = &corpus[batcher.next()];
            let loss =
                loss_and_grads(&params, seq, &LossMask::All, None, &req, weight, &mut grads)?;
            finite_or_abort(loss, step, &format!("sequence of {} tokens", seq.len()))?;
            total += loss;
        }
        clip(&mut grads, cfg);
        let g = grads
            .backbone
            .as_ref()
            .expect("backbone gradients were requested");
        let gt: Vec<&Tensor> = g.named_tensors().into_iter().map(|(_, t)| t).collect();
        let active = alloc::vec![true; gt.len()];
        let opt_cfg = AdamW::from_config(cfg, step);
        optimizer_step(&mut params.tensors_mut(), &gt, &active, &mut opt, &opt_cfg)?;
        let rec = StepRecord {
            step,
            loss: total * weight,
            lr: opt_cfg.lr,
        };
        on_step(&rec, &params);
        history.push(rec);
    }
    Ok((params, history))
}

pub fn pretrain_clm(
    params: &BackboneParams,
    corpus: &[Vec<u32>],
    cfg: &TrainConfig,
) -> Result<(BackboneParams, Vec<StepRecord>)> {
    pretrain_clm_with(params, corpus, cfg, |_, _| {})
}

/// Which adaptation tensors a step may update.
fn finetune_active(
    names: &[String],
    tasks: &BTreeSet<Task>,
    schedule: Schedule,
    step: usize,
    max: usize,
) -> Vec<bool> {
    let first_half = step * 2 <= max;
    let (task_level, lora_level) = match schedule {
        Schedule::Joint => (true, true),
        Schedule::AdaptersFirst => (first_half, !first_half),
        Schedule::LoraFirst => (!first_half, first_half),
    };
    names
        .iter()
        .map(|n| {
            if n.starts_with("lora.") {
                lora_level
            } else {
                task_level
                    && tasks.iter().any(|t| {
                        n.starts_with(&format!("adapter.{t}.")) || *n == format!("prefix.{t}")
                    })
            }
        })
        .collect()
}

/// Task fine-tuning of the adaptation state on a frozen backbone. The loss
/// covers only the output segment of each pair; multi-adapter samples route
/// through their own task's adapter and prefix strategies condition on the
/// task's prefix. Tensors belonging to tasks absent from `data` are never
/// touched.
pub fn finetune_with(
    params: &BackboneParams,
    state: &AdaptationState,
    data: &[Sample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &AdaptationState),
) -> Result<(AdaptationState, Vec<StepRecord>)> {
    cfg.validate()?;
    if cfg.trainable != Trainable::AdaptationOnly {
        return Err(Error::FrozenBackbone);
    }
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if vocab.len() != params.config.vocab_size {
        return Err(Error::Shape(format!(
            "vocabulary of {} for a model of {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    state.validate_against(&params.config)?;
    let n_prefix = state.n_prefix();
    let mut encoded = Vec::with_capacity(data.len());
    let mut tasks = BTreeSet::new();
    for s in data {
        if !state.has_task(s.task) {
            return Err(Error::UnknownTask(s.task));
        }
        let enc = tokenizer::encode_pair(vocab, s, n_prefix);
        if enc.ids.len() > params.config.max_context {
            return Err(Error::ContextOverflow {
                len: enc.ids.len(),
                max: params.config.max_context,
            });
        }
        tasks.insert(s.task);
        encoded.push((s.task, enc));
    }

    let mut state = state.clone();
    state.mixing = None;
    let names: Vec<String> = state.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut opt = OptState::new(state.named_tensors().into_iter().map(|(_, t)| t));
    let mut batcher = Batcher::new(encoded.len(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.max_steps);
    let n = cfg.effective_batch();
    let weight = 1.0 / n as f64;
    for step in 1..=cfg.max_steps {
        let req = GradRequest {
            backbone: false,
            adaptation: true,
            dropout_seed: None,
        };
        let mut grads = Gradients::zeros(params, Some(&state), &req);
        let mut total = 0.0;
        for k in 0..n {
            let (task, enc) = &encoded[batcher.next()];
            state.active_task = *task;
            let req = GradRequest {
                dropout_seed: Some(dropout_seed(cfg, step, k)),
                ..req
            };
            let mask = LossMask::OutputFrom(enc.output_start);
            let loss = loss_and_grads(
                params,
                &enc.ids,
                &mask,
                Some(&state),
                &req,
                weight,
                &mut grads,
            )?;
            finite_or_abort(
                loss,
                step,
                &format!("{task} pair of {} tokens", enc.ids.len()),
            )?;
            total += loss;
        }
        clip(&mut grads, cfg);
        let active = finetune_active(&names, &tasks, cfg.schedule, step, cfg.max_steps);
        let g = grads
            .adaptation
            .as_ref()
            .expect("adaptation gradients were requested");
        let gt: Vec<&Tensor> = g.named_tensors().into_iter().map(|(_, t)| t).collect();
        let opt_cfg = AdamW::from_config(cfg, step);
        let mut pt: Vec<&mut Tensor> = state
            .named_tensors_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        optimizer_step(&mut pt, &gt, &active, &mut opt, &opt_cfg)?;
        let rec = StepRecord {
            step,
            loss: total * weight,
            lr: opt_cfg.lr,
        };
        on_step(&rec, &state);
        history.push(rec);
    }
    state.active_task = encoded[0].0;
    Ok((state, history))
}

pub fn finetune(
    params: &BackboneParams,
    state: &AdaptationState,
    data: &[Sample],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(AdaptationState, Vec<StepRecord>)> {
    finetune_with(params, state, data, vocab, cfg, |_, _| {})
}
