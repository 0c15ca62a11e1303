use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tokenizer::{Role, Vocab};

/// Unit over which edit distance is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Unit {
    #[default]
    Char,
    Token,
}

impl core::str::FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Unit::Char),
            "token" => Ok(Unit::Token),
            other => Err(Error::Config(alloc::format!(
                "unknown unit {other:?} (expected char or token)"
            ))),
        }
    }
}

/// Levenshtein distance with unit costs, two-row dynamic programme.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = alloc::vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - dist / max(len)`, with two empty sequences scoring 1.
pub fn similarity_of<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

/// Character-level normalized edit similarity.
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    similarity_of(&a, &b)
}

/// Edit similarity at the requested granularity; `Token` compares the
/// tokenizer's id sequences for `role`.
pub fn edit_similarity_in(unit: Unit, vocab: &Vocab, role: Role, a: &str, b: &str) -> f64 {
    match unit {
        Unit::Char => edit_similarity(a, b),
        Unit::Token => similarity_of(&vocab.encode(a, role).ids, &vocab.encode(b, role).ids),
    }
}
