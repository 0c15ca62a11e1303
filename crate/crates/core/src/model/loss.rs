use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable log-softmax of one logit row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
    let lse = max + libm::log(sum);
    row.iter().map(|v| v - lse).collect()
}

fn check(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<usize> {
    if logits.rows() != targets.len() || mask.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows(),
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&id) = targets.iter().find(|&&id| id as usize >= logits.cols()) {
        return Err(Error::TokenOutOfRange {
            id,
            size: logits.cols(),
        });
    }
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::AllMasked);
    }
    Ok(n)
}

/// Mean negative log-likelihood of `targets` over unmasked rows.
pub fn clm_loss(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<f64> {
    let n = check(logits, targets, mask)?;
    let mut total = 0.0;
    for (j, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            total -= log_softmax_row(logits.row(j))[t as usize];
        }
    }
    Ok(total / n as f64)
}

/// Loss plus its gradient with respect to the logits. Masked rows get a
/// zero gradient.
pub fn clm_loss_with_grad(
    logits: &Tensor,
    targets: &[u32],
    mask: &[bool],
) -> Result<(f64, Tensor)> {
    let n = check(logits, targets, mask)?;
    let inv = 1.0 / n as f64;
    let mut grad = Tensor::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (j, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let lp = log_softmax_row(logits.row(j));
        total -= lp[t as usize];
        let g = grad.row_mut(j);
        for (gi, l) in g.iter_mut().zip(&lp) {
            *gi = libm::exp(*l) * inv;
        }
        g[t as usize] -= inv;
    }
    Ok((total * inv, grad))
}
