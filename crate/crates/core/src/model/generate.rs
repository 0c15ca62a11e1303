use alloc::vec::Vec;

use super::loss::log_softmax_row;
use super::transformer::{forward, forward_last, LossMask};
use super::BackboneParams;
use crate::adaptation::AdaptationState;
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::EOS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Sampled { seed: u64, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Prompt followed by every generated token (including a final EOS).
    pub ids: Vec<u32>,
    pub prompt_len: usize,
    pub hit_eos: bool,
}

impl Generation {
    /// Generated tokens without the terminating EOS.
    pub fn output(&self) -> &[u32] {
        let end = if self.hit_eos {
            self.ids.len() - 1
        } else {
            self.ids.len()
        };
        &self.ids[self.prompt_len..end]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGeneration {
    pub generation: Generation,
    /// Model log-probability (temperature 1) of each generated token.
    pub token_logprobs: Vec<f64>,
}

impl ScoredGeneration {
    pub fn total_logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

/// Extends `prompt` until EOS or `max_new` tokens.
pub fn generate(
    params: &BackboneParams,
    adaptation: Option<&AdaptationState>,
    prompt: &[u32],
    mode: Sampling,
    max_new: usize,
) -> Result<Generation> {
    generate_scored(params, adaptation, prompt, mode, max_new).map(|s| s.generation)
}

pub fn generate_scored(
    params: &BackboneParams,
    adaptation: Option<&AdaptationState>,
    prompt: &[u32],
    mode: Sampling,
    max_new: usize,
) -> Result<ScoredGeneration> {
    let max = params.config.max_context;
    if prompt.len() + max_new > max {
        return Err(Error::ContextOverflow {
            len: prompt.len() + max_new,
            max,
        });
    }
    if prompt.is_empty() && max_new > 0 {
        return Err(Error::EmptyInput);
    }
    if let Sampling::Sampled { temperature, .. } = mode {
        if !(temperature > 0.0) {
            return Err(Error::Config(alloc::format!(
                "temperature {temperature} must be positive"
            )));
        }
    }
    let mut rng = match mode {
        Sampling::Sampled { seed, .. } => Some(rng::seeded(seed)),
        Sampling::Greedy => None,
    };
    let mut ids = prompt.to_vec();
    let mut token_logprobs = Vec::new();
    let mut hit_eos = false;
    for _ in 0..max_new {
        let logits = forward_last(params, &ids, adaptation)?;
        let lp = log_softmax_row(&logits);
        let next = match (mode, rng.as_mut()) {
            (Sampling::Sampled { temperature, .. }, Some(r)) => sample(&logits, temperature, r),
            _ => argmax(&lp),
        };
        token_logprobs.push(lp[next]);
        ids.push(next as u32);
        if next as u32 == EOS {
            hit_eos = true;
            break;
        }
    }
    Ok(ScoredGeneration {
        generation: Generation {
            ids,
            prompt_len: prompt.len(),
            hit_eos,
        },
        token_logprobs,
    })
}

/// First index of the maximum, so ties resolve deterministically.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], temperature: f64, r: &mut rng::Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let lp = log_softmax_row(&scaled);
    let u = rng::uniform(r);
    let mut acc = 0.0;
    for (i, l) in lp.iter().enumerate() {
        acc += libm::exp(*l);
        if u < acc {
            return i;
        }
    }
    argmax(&lp)
}

/// Teacher-forced log-probability of `ids[from..]` given everything before it.
pub fn sequence_logprob(
    params: &BackboneParams,
    adaptation: Option<&AdaptationState>,
    ids: &[u32],
    from: usize,
) -> Result<f64> {
    if from == 0 || from > ids.len() {
        return Err(Error::Config(alloc::format!(
            "scored span must start in 1..={}",
            ids.len()
        )));
    }
    let logits = forward(params, ids, adaptation)?;
    let mut total = 0.0;
    for j in from..ids.len() {
        total += log_softmax_row(logits.row(j - 1))[ids[j] as usize];
    }
    Ok(total)
}

/// Summed negative log-likelihood and token count of the rows selected by
/// `mask` (row `j` predicts `ids[j + 1]`).
pub fn masked_nll(
    params: &BackboneParams,
    adaptation: Option<&AdaptationState>,
    ids: &[u32],
    mask: &LossMask,
) -> Result<(f64, usize)> {
    if ids.len() < 2 {
        return Ok((0.0, 0));
    }
    let inputs = &ids[..ids.len() - 1];
    let m = mask.resolve(inputs.len())?;
    let logits = forward(params, inputs, adaptation)?;
    let mut total = 0.0;
    let mut n = 0;
    for (j, keep) in m.iter().enumerate() {
        if *keep {
            total -= log_softmax_row(logits.row(j))[ids[j + 1] as usize];
            n += 1;
        }
    }
    Ok((total, n))
}

/// `exp` of the mean next-token NLL over every token of every sequence.
pub fn perplexity(
    params: &BackboneParams,
    adaptation: Option<&AdaptationState>,
    corpus: &[Vec<u32>],
) -> Result<f64> {
    let items: Vec<(&[u32], LossMask)> = corpus
        .iter()
        .map(|s| (s.as_slice(), LossMask::All))
        .collect();
    perplexity_masked(params, adaptation, &items)
}

/// Perplexity restricted to masked rows, token-weighted across sequences.
pub fn perplexity_masked(
    params: &BackboneParams,
    adaptation: Option<&AdaptationState>,
    items: &[(&[u32], LossMask)],
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    let mut n = 0;
    for (ids, mask) in items {
        let (s, c) = masked_nll(params, adaptation, ids, mask)?;
        total += s;
        n += c;
    }
    if n == 0 {
        return Err(Error::AllMasked);
    }
    Ok(libm::exp(total / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> BackboneParams {
        BackboneParams::init(
            ModelConfig {
                vocab_size: 9,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 8,
                max_context: 12,
                dropout: 0.0,
                tied_head: false,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_new_tokens_returns_prompt() {
        let g = generate(&params(), None, &[1, 4, 3], Sampling::Greedy, 0).unwrap();
        assert_eq!(g.ids, [1, 4, 3]);
        assert!(g.output().is_empty());
    }

    #[test]
    fn greedy_and_seeded_sampling_are_repeatable() {
        let p = params();
        let a = generate(&p, None, &[1, 4], Sampling::Greedy, 8).unwrap();
        assert_eq!(a, generate(&p, None, &[1, 4], Sampling::Greedy, 8).unwrap());
        let s = Sampling::Sampled {
            seed: 5,
            temperature: 1.5,
        };
        assert_eq!(
            generate(&p, None, &[1, 4], s, 8).unwrap(),
            generate(&p, None, &[1, 4], s, 8).unwrap()
        );
    }

    #[test]
    fn overflow_is_refused() {
        assert_eq!(
            generate(&params(), None, &[1, 4, 3], Sampling::Greedy, 10),
            Err(Error::ContextOverflow { len: 13, max: 12 })
        );
    }

    #[test]
    fn generated_logprobs_factorize_the_sequence() {
        let p = params();
        let s = generate_scored(&p, None, &[1, 5, 6], Sampling::Greedy, 9).unwrap();
        let joint = sequence_logprob(&p, None, &s.generation.ids, 3).unwrap();
        assert!((joint - s.total_logprob()).abs() < 1e-9);
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let mut p = params();
        p.head.as_mut().unwrap().fill(0.0);
        let ppl = perplexity(&p, None, &[vec![1, 2, 3, 4], vec![5, 6]]).unwrap();
        assert!((ppl - 9.0).abs() / 9.0 < 1e-12);
        assert_eq!(perplexity(&p, None, &[]), Err(Error::EmptyCorpus));
    }
}
