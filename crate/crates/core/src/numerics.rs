//! Numerically stable primitives on logits and probability vectors.
//!
//! All probability math is `f64`. Logarithms and divisions of probabilities are
//! floored at [`PROB_FLOOR`] so that a zero probability never produces `-inf`.

use std::ops::Deref;

use crate::error::{FerError, Result};

/// Floor applied to probabilities before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` accepted by [`ProbVector::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A probability distribution over `K >= 1` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates and wraps `probs`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(FerError::InvalidInput("empty probability vector".into()));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
            return Err(FerError::InvalidInput(format!(
                "probability entry {i} is {p}, expected a finite value >= 0"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(FerError::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(ProbVector(probs))
    }

    /// Uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform distribution needs at least one class");
        ProbVector(vec![1.0 / k as f64; k])
    }

    /// One-hot distribution on `class` out of `k`.
    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        check_class(class, k)?;
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Ok(ProbVector(v))
    }

    pub(crate) fn from_raw_unchecked(probs: Vec<f64>) -> Self {
        ProbVector(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_class(class: usize, k: usize) -> Result<()> {
    if class >= k {
        return Err(FerError::Index { index: class, len: k });
    }
    Ok(())
}

fn check_logits(logits: &[f64], tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(FerError::InvalidParameter(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    if logits.is_empty() {
        return Err(FerError::InvalidInput("empty logit vector".into()));
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(FerError::InvalidInput(format!(
            "logit {i} is not finite ({})",
            logits[i]
        )));
    }
    Ok(())
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `softmax(logits / tau)` with max-subtraction.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<ProbVector> {
    check_logits(logits, tau)?;
    let max = max_of(logits);
    let mut out: Vec<f64> = logits.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(ProbVector(out))
}

/// `log(softmax(logits / tau))` through log-sum-exp.
pub fn log_softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_logits(logits, tau)?;
    let max = max_of(logits);
    let shifted: Vec<f64> = logits.iter().map(|&x| (x - max) / tau).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|s| s - lse).collect())
}

/// `-ln pred[target_class]`, with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(pred: &ProbVector, target_class: usize) -> Result<f64> {
    check_class(target_class, pred.len())?;
    Ok(-pred[target_class].max(PROB_FLOOR).ln())
}

/// `KL(target || model)` in nats. Zero-mass target entries contribute nothing.
pub fn kl_divergence(target: &ProbVector, model: &ProbVector) -> Result<f64> {
    if target.len() != model.len() {
        return Err(FerError::Shape(format!(
            "KL between distributions of size {} and {}",
            target.len(),
            model.len()
        )));
    }
    let kl: f64 = target
        .iter()
        .zip(model.iter())
        .filter(|(t, _)| **t > 0.0)
        .map(|(&t, &m)| t * (t.ln() - m.max(PROB_FLOOR).ln()))
        .sum();
    // Rounding can leave a tiny negative value when target == model.
    Ok(kl.max(0.0))
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Gradient of `cross_entropy(softmax(logits), target_class)` w.r.t. the logits.
pub fn softmax_cross_entropy_grad(logits: &[f64], target_class: usize) -> Result<Vec<f64>> {
    let mut grad = softmax_temp(logits, 1.0)?.into_inner();
    check_class(target_class, grad.len())?;
    grad[target_class] -= 1.0;
    Ok(grad)
}

/// Gradient of `KL(target || softmax(logits / tau))` w.r.t. the logits.
///
/// The target is treated as a constant: `(softmax(logits / tau) - target) / tau`.
pub fn softmax_kl_grad(target: &ProbVector, logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    let model = softmax_temp(logits, tau)?;
    if model.len() != target.len() {
        return Err(FerError::Shape(format!(
            "target has {} classes, logits have {}",
            target.len(),
            model.len()
        )));
    }
    Ok(model.iter().zip(target.iter()).map(|(q, t)| (q - t) / tau).collect())
}

/// Compares an analytic gradient against central differences.
///
/// Returns the largest entrywise `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, grad: &[f64], point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(FerError::InvalidParameter(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    if grad.len() != point.len() {
        return Err(FerError::Shape(format!(
            "gradient has {} entries, point has {}",
            grad.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(FerError::Numeric(format!("function not finite near coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = (grad[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
