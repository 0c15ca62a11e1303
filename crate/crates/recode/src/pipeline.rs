//! Glue between corpus files and the training loops.

use std::collections::BTreeSet;

use recode_core::corpus::{normalize_asm, MiniProgram};
use recode_core::model::{masked_nll, LossMask};
use recode_core::tokenizer::encode_document;
use recode_core::{BackboneParams, NormalizationConfig, Role, Sample, Task, Vocab};

/// Both translation directions for every generated program.
pub fn mini_corpus_samples(programs: &[MiniProgram]) -> Vec<Sample> {
    let mut out = Vec::with_capacity(programs.len() * 2);
    for (i, p) in programs.iter().enumerate() {
        for task in Task::ALL {
            let s = Sample::from_pair(format!("p{i:05}.{task}"), &p.source, &p.asm, task)
                .expect("generated programs are non-empty");
            out.push(s.with_expected_exit(Some(p.expected_exit_code)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Documents {
    pub ids: Vec<Vec<u32>>,
    /// Documents longer than the context window, left out whole.
    pub excluded: usize,
}

/// Pretraining documents: every distinct assembly text (normalized when
/// `norm` is given) and every distinct source text, in first-appearance
/// order, each wrapped as `BOS text EOS`.
pub fn pretraining_documents(
    samples: &[Sample],
    vocab: &Vocab,
    norm: Option<&NormalizationConfig>,
) -> Documents {
    let mut seen = BTreeSet::new();
    let mut docs = Documents {
        ids: Vec::new(),
        excluded: 0,
    };
    for s in samples {
        for (text, role) in [
            (s.asm_text(), Role::Assembly),
            (s.source_text(), Role::Source),
        ] {
            if !seen.insert((role == Role::Assembly, text)) {
                continue;
            }
            let text = match (role, norm) {
                (Role::Assembly, Some(cfg)) => {
                    let cfg = NormalizationConfig {
                        rng_seed: cfg.rng_seed.wrapping_add(seen.len() as u64),
                        ..*cfg
                    };
                    normalize_asm(text, &cfg)
                }
                _ => text.to_string(),
            };
            let stream = encode_document(vocab, &text, role);
            if stream.excluded {
                docs.excluded += 1;
            } else {
                docs.ids.push(stream.ids);
            }
        }
    }
    docs
}

/// Mean over documents of the per-token negative log-likelihood, the same
/// quantity the pretraining loop reports per batch.
pub fn corpus_loss(params: &BackboneParams, docs: &[Vec<u32>]) -> recode_core::Result<f64> {
    if docs.is_empty() {
        return Err(recode_core::Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for d in docs {
        let (nll, n) = masked_nll(params, None, d, &LossMask::All)?;
        total += nll / n.max(1) as f64;
    }
    Ok(total / docs.len() as f64)
}
