use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{hidden_states, BackboneParams};
use crate::tensor::{dot, Tensor};
use crate::tokenizer::{Role, Vocab, BOS};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn embed(
    params: &BackboneParams,
    vocab: &Vocab,
    role: Role,
    text: &str,
) -> Result<(Vec<u32>, Tensor)> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(vocab.encode(text, role).ids);
    if ids.len() == 1 {
        return Err(Error::EmptyInput);
    }
    let h = hidden_states(params, &ids, None)?;
    Ok((ids, h))
}

/// Mean over rows of `a` of the best cosine against any row of `b`
/// (the leading BOS row of each is skipped).
fn greedy_match(a: &Tensor, b: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 1..a.rows() {
        let best = (1..b.rows())
            .map(|j| cosine(a.row(i), b.row(j)))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    total / (a.rows() - 1) as f64
}

/// Greedy-matching F1 over the backbone's final hidden states, BERTScore
/// style. Precision and recall are mapped from `[-1, 1]` to `[0, 1]` before
/// they are combined. Identical token sequences score exactly 1.
pub fn semantic_similarity(
    params: &BackboneParams,
    vocab: &Vocab,
    role: Role,
    a: &str,
    b: &str,
) -> Result<f64> {
    let (ia, ha) = embed(params, vocab, role, a)?;
    let (ib, hb) = embed(params, vocab, role, b)?;
    if ia == ib {
        return Ok(1.0);
    }
    let recall = (greedy_match(&ha, &hb) + 1.0) / 2.0;
    let precision = (greedy_match(&hb, &ha) + 1.0) / 2.0;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * precision * recall / (precision + recall)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn setup() -> (BackboneParams, Vocab) {
        let v = Vocab::builtin(64).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::for_vocab(&v)
        };
        (BackboneParams::init(cfg, 7).unwrap(), v)
    }

    #[test]
    fn self_match_symmetry_and_errors() {
        let (p, v) = setup();
        assert_eq!(
            semantic_similarity(&p, &v, Role::Source, "return a;", "return a;").unwrap(),
            1.0
        );
        let ab = semantic_similarity(&p, &v, Role::Source, "int x", "zzq").unwrap();
        let ba = semantic_similarity(&p, &v, Role::Source, "zzq", "int x").unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((0.0..1.0).contains(&ab));
        assert_eq!(
            semantic_similarity(&p, &v, Role::Source, "", "a"),
            Err(Error::EmptyInput)
        );
    }
}
