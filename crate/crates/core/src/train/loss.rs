//! Class-weighted cross-entropy.

use crate::error::{Error, Result};

fn check(logits: &[f64], classes: usize, labels: &[usize], weights: &[f64]) -> Result<()> {
    if weights.len() != classes {
        return Err(Error::Shape(format!("{} class weights for {classes} classes", weights.len())));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::Invalid("class weights must be finite and positive".into()));
    }
    if labels.is_empty() || logits.len() != labels.len() * classes {
        return Err(Error::Shape(format!(
            "{} logits for {} labels of {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    Ok(())
}

/// Batch mean of `w[y] * (logsumexp(logits) - logits[y])`.
pub fn weighted_cross_entropy(logits: &[f64], classes: usize, labels: &[usize], weights: &[f64]) -> Result<f64> {
    weighted_cross_entropy_grad(logits, classes, labels, weights).map(|(l, _)| l)
}

/// Loss together with its gradient with respect to the logits.
pub fn weighted_cross_entropy_grad(
    logits: &[f64],
    classes: usize,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check(logits, classes, labels, weights)?;
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        let w = weights[y];
        loss += w * (lse - row[y]);
        for (k, g) in grad[b * classes..(b + 1) * classes].iter_mut().enumerate() {
            let p = (row[k] - lse).exp();
            *g = w * (p - if k == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Weights `n / (K · n_c)`, i.e. inversely proportional to class frequency
/// and normalised so that `Σ_c w_c · freq_c = 1`.
pub fn inverse_frequency_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or(Error::Label { label: l, classes })? += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Invalid(format!("class {c} absent from the training split")));
    }
    let total = labels.len() as f64;
    Ok(counts.iter().map(|&n| total / (classes as f64 * n as f64)).collect())
}
