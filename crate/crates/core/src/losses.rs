//! Training objectives and their gradients with respect to the logits.
//!
//! * `Std`: cross-entropy.
//! * `Fer`: cross-entropy for samples without a remembered behavior; for the
//!   others `alpha * CE + beta * KL(b_hat || softmax(z / tau))`, with
//!   `(alpha, beta)` ramping linearly over training.
//! * `Lsr`: cross-entropy against `(1 - eps) * one_hot + eps / K`.
//! * `MaxEnt`: cross-entropy minus `lambda` times the output entropy.
//!
//! The cross-entropy term always uses temperature 1; only the KL term is tempered.

use serde::{Deserialize, Serialize};

use crate::error::{FerError, Result};
use crate::numerics::{
    check_class, cross_entropy, entropy, kl_divergence, log_softmax_temp, softmax_cross_entropy_grad, softmax_kl_grad,
    softmax_temp, ProbVector, PROB_FLOOR, SUM_TOLERANCE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Std,
    Fer,
    Lsr,
    #[serde(alias = "max-ent", alias = "max_ent")]
    MaxEnt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Std => "std",
            Method::Fer => "fer",
            Method::Lsr => "lsr",
            Method::MaxEnt => "maxent",
        }
    }
}

/// Argument order of the KL regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(b_hat || model)`; gradient flows through the model side only.
    #[default]
    TargetModel,
    /// `KL(model || b_hat)`.
    ModelTarget,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub method: Method,
    /// Behavior temperature.
    pub tau: f64,
    /// Confidence scale of the behavior average.
    pub mu: f64,
    /// Label-smoothing weight.
    pub epsilon: f64,
    /// Entropy-penalty weight.
    pub lambda: f64,
    /// Total epochs `M` of the alpha/beta ramp.
    pub total_epochs: usize,
    /// Final regularizer weight of the ramp.
    pub rho: f64,
    /// Ablation: regularize every sample with an unconditionally updated average.
    pub no_gate: bool,
    /// Ablation: use only the most recent behavior instead of the average.
    pub no_average: bool,
    /// Noisy-label variant: no correctness gate.
    pub noisy: bool,
    /// Multiply the KL term by `tau^2`.
    pub tau_squared: bool,
    pub kl_direction: KlDirection,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            method: Method::Std,
            tau: 5.0,
            mu: 1.0,
            epsilon: 0.1,
            lambda: 0.5,
            total_epochs: 1,
            rho: 0.9,
            no_gate: false,
            no_average: false,
            noisy: false,
            tau_squared: false,
            kl_direction: KlDirection::TargetModel,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FerError::Config(m));
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return bad(format!("mu must be >= 0, got {}", self.mu));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0, 1), got {}", self.epsilon));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must be in [0, 1], got {}", self.rho));
        }
        if self.total_epochs == 0 {
            return bad("total epochs must be at least 1".into());
        }
        Ok(())
    }

    /// Whether the behavior memory is updated without the correctness gate.
    pub fn unconditional_updates(&self) -> bool {
        self.method == Method::Fer && (self.no_gate || self.noisy)
    }

    /// Loss for one sample. `target` is only consulted by `Fer`.
    pub fn per_sample(
        &self,
        logits: &[f64],
        true_class: usize,
        target: Option<&ProbVector>,
        epoch: usize,
    ) -> Result<PerSampleLoss> {
        match self.method {
            Method::Std => std_loss(logits, true_class),
            Method::Fer => fer_loss(logits, true_class, target, epoch, self),
            Method::Lsr => lsr_loss(logits, true_class, self.epsilon),
            Method::MaxEnt => maxent_loss(logits, true_class, self.lambda),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Cross-entropy component (unweighted).
    pub ce: f64,
    /// Regularizer component (unweighted KL, or entropy for `MaxEnt`); 0 when unused.
    pub kl: f64,
}

/// Linear ramp `alpha = 1 - rho k / M`, `beta = rho k / M`.
pub fn alpha_beta(epoch: usize, total_epochs: usize, rho: f64) -> Result<(f64, f64)> {
    if total_epochs == 0 {
        return Err(FerError::Config("total epochs must be at least 1".into()));
    }
    if epoch > total_epochs {
        return Err(FerError::Schedule {
            epoch,
            total: total_epochs,
        });
    }
    let beta = rho * epoch as f64 / total_epochs as f64;
    Ok((1.0 - beta, beta))
}

pub fn std_loss(logits: &[f64], true_class: usize) -> Result<PerSampleLoss> {
    check_class(true_class, logits.len())?;
    let ce = cross_entropy(&softmax_temp(logits, 1.0)?, true_class)?;
    Ok(PerSampleLoss {
        value: ce,
        grad: softmax_cross_entropy_grad(logits, true_class)?,
        ce,
        kl: 0.0,
    })
}

fn check_target(target: &ProbVector, k: usize) -> Result<()> {
    if target.len() != k {
        return Err(FerError::Invariant(format!(
            "target has {} classes, logits have {k}",
            target.len()
        )));
    }
    let sum: f64 = target.iter().sum();
    if target.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(FerError::Invariant(format!(
            "target is not a distribution: {:?}",
            target.as_slice()
        )));
    }
    Ok(())
}

/// Regularizer value and logit gradient for the configured KL orientation.
fn kl_term(target: &ProbVector, logits: &[f64], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    match spec.kl_direction {
        KlDirection::TargetModel => {
            let model = softmax_temp(logits, spec.tau)?;
            Ok((
                kl_divergence(target, &model)?,
                softmax_kl_grad(target, logits, spec.tau)?,
            ))
        }
        KlDirection::ModelTarget => {
            let log_q = log_softmax_temp(logits, spec.tau)?;
            let ratios: Vec<f64> = log_q
                .iter()
                .zip(target.iter())
                .map(|(lq, t)| lq - t.max(PROB_FLOOR).ln())
                .collect();
            let value: f64 = log_q.iter().zip(&ratios).map(|(lq, r)| lq.exp() * r).sum();
            let grad = log_q
                .iter()
                .zip(&ratios)
                .map(|(lq, r)| lq.exp() * (r - value) / spec.tau)
                .collect();
            Ok((value, grad))
        }
    }
}

/// Gated objective. With no target this is exactly [`std_loss`].
pub fn fer_loss(
    logits: &[f64],
    true_class: usize,
    target: Option<&ProbVector>,
    epoch: usize,
    spec: &LossSpec,
) -> Result<PerSampleLoss> {
    let Some(target) = target else {
        return std_loss(logits, true_class);
    };
    check_class(true_class, logits.len())?;
    check_target(target, logits.len())?;
    let (alpha, beta) = alpha_beta(epoch, spec.total_epochs, spec.rho)?;
    let ce = cross_entropy(&softmax_temp(logits, 1.0)?, true_class)?;
    let ce_grad = softmax_cross_entropy_grad(logits, true_class)?;
    let (kl, kl_grad) = kl_term(target, logits, spec)?;
    let scale = if spec.tau_squared {
        beta * spec.tau * spec.tau
    } else {
        beta
    };
    Ok(PerSampleLoss {
        value: alpha * ce + scale * kl,
        grad: ce_grad
            .iter()
            .zip(&kl_grad)
            .map(|(g, h)| alpha * g + scale * h)
            .collect(),
        ce,
        kl,
    })
}

/// Smoothed target `(1 - eps) * one_hot + eps / K`.
pub fn lsr_target(classes: usize, epsilon: f64, true_class: usize) -> Result<ProbVector> {
    check_class(true_class, classes)?;
    let mut y = vec![epsilon / classes as f64; classes];
    y[true_class] += 1.0 - epsilon;
    Ok(ProbVector::from_raw_unchecked(y))
}

pub fn lsr_loss(logits: &[f64], true_class: usize, epsilon: f64) -> Result<PerSampleLoss> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(FerError::InvalidParameter(format!(
            "epsilon must be in [0, 1), got {epsilon}"
        )));
    }
    let y = lsr_target(logits.len(), epsilon, true_class)?;
    let p = softmax_temp(logits, 1.0)?;
    let value = -y
        .iter()
        .zip(p.iter())
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, q)| t * q.max(PROB_FLOOR).ln())
        .sum::<f64>();
    let grad = p.iter().zip(y.iter()).map(|(q, t)| q - t).collect();
    Ok(PerSampleLoss {
        value,
        grad,
        ce: cross_entropy(&p, true_class)?,
        kl: 0.0,
    })
}

pub fn maxent_loss(logits: &[f64], true_class: usize, lambda: f64) -> Result<PerSampleLoss> {
    if !(lambda >= 0.0) {
        return Err(FerError::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut base = std_loss(logits, true_class)?;
    let p = softmax_temp(logits, 1.0)?;
    let log_p = log_softmax_temp(logits, 1.0)?;
    let h = entropy(&p);
    for ((g, q), lq) in base.grad.iter_mut().zip(p.iter()).zip(&log_p) {
        // d(-H)/dz_j = p_j (ln p_j + H)
        *g += lambda * q * (lq + h);
    }
    base.value -= lambda * h;
    base.kl = h;
    Ok(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;

    fn fer_spec(tau: f64, total: usize, rho: f64) -> LossSpec {
        LossSpec {
            method: Method::Fer,
            tau,
            total_epochs: total,
            rho,
            ..LossSpec::default()
        }
    }

    #[test]
    fn alpha_beta_schedule() {
        assert_eq!(alpha_beta(0, 10, 0.9).unwrap(), (1.0, 0.0));
        let (a, b) = alpha_beta(10, 10, 0.9).unwrap();
        assert!((a - 0.1).abs() < 1e-15 && (b - 0.9).abs() < 1e-15);
        let (a, b) = alpha_beta(5, 10, 0.9).unwrap();
        assert!((a - 0.55).abs() < 1e-15 && (b - 0.45).abs() < 1e-15);
        assert!(matches!(
            alpha_beta(11, 10, 0.9),
            Err(FerError::Schedule { epoch: 11, total: 10 })
        ));
    }

    #[test]
    fn std_examples() {
        let l = std_loss(&[50.0, -50.0, 0.0], 0).unwrap();
        assert!(l.value < 1e-20);
        let l = std_loss(&[0.0, 0.0], 0).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15);
        assert_eq!(l.grad, vec![-0.5, 0.5]);
        assert!(matches!(std_loss(&[0.0, 0.0], 2), Err(FerError::Index { .. })));
    }

    #[test]
    fn fer_without_target_is_std_bitwise() {
        let spec = fer_spec(5.0, 10, 0.9);
        let logits = [0.4, -1.3, 2.2];
        assert_eq!(
            fer_loss(&logits, 1, None, 7, &spec).unwrap(),
            std_loss(&logits, 1).unwrap()
        );
    }

    #[test]
    fn fer_at_epoch_zero_matches_std_value() {
        let spec = fer_spec(5.0, 10, 0.9);
        let logits = [0.4, -1.3, 2.2];
        let target = ProbVector::new(vec![0.1, 0.1, 0.8]).unwrap();
        let fer = fer_loss(&logits, 1, Some(&target), 0, &spec).unwrap();
        assert_eq!(fer.value, std_loss(&logits, 1).unwrap().value);
    }

    #[test]
    fn fer_composite_value() {
        let spec = fer_spec(1.0, 2, 1.0);
        let target = ProbVector::new(vec![0.75, 0.25]).unwrap();
        let l = fer_loss(&[0.0, 0.0], 0, Some(&target), 1, &spec).unwrap();
        assert!((l.value - 0.411980).abs() < 1e-5, "{}", l.value);
    }

    #[test]
    fn fer_rejects_invalid_target() {
        let spec = fer_spec(1.0, 2, 0.9);
        let wrong_k = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(
            fer_loss(&[0.0, 0.0], 0, Some(&wrong_k), 1, &spec),
            Err(FerError::Invariant(_))
        ));
        let unnormalized = ProbVector::from_raw_unchecked(vec![0.9, 0.9]);
        assert!(matches!(
            fer_loss(&[0.0, 0.0], 0, Some(&unnormalized), 1, &spec),
            Err(FerError::Invariant(_))
        ));
    }

    #[test]
    fn fer_one_hot_target_is_finite() {
        let target = ProbVector::one_hot(3, 2).unwrap();
        for dir in [KlDirection::TargetModel, KlDirection::ModelTarget] {
            let spec = LossSpec {
                kl_direction: dir,
                ..fer_spec(5.0, 4, 0.9)
            };
            let l = fer_loss(&[30.0, -20.0, -40.0], 0, Some(&target), 3, &spec).unwrap();
            assert!(l.value.is_finite() && l.grad.iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn lsr_examples() {
        let logits = [0.3, -0.2, 1.1];
        assert_eq!(
            lsr_loss(&logits, 2, 0.0).unwrap().grad,
            std_loss(&logits, 2).unwrap().grad
        );
        assert!((lsr_loss(&logits, 2, 0.0).unwrap().value - std_loss(&logits, 2).unwrap().value).abs() < 1e-15);
        let y = lsr_target(4, 0.1, 2).unwrap();
        let want = [0.025, 0.025, 0.925, 0.025];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(lsr_loss(&logits, 0, 1.0).is_err());
    }

    #[test]
    fn maxent_examples() {
        let logits = [0.3, -0.2, 1.1];
        let m = maxent_loss(&logits, 1, 0.0).unwrap();
        let s = std_loss(&logits, 1).unwrap();
        assert_eq!(m.value, s.value);
        assert_eq!(m.grad, s.grad);
        let m = maxent_loss(&[0.0, 0.0], 0, 0.5).unwrap();
        assert!((m.value - 0.346574).abs() < 1e-6);
    }

    #[test]
    fn lsr_equivalence_gradients() {
        let eps = 0.1;
        let spec = LossSpec {
            no_gate: true,
            ..fer_spec(1.0, 10, eps)
        };
        let uniform = ProbVector::uniform(5);
        let logits = [0.7, -1.1, 2.3, 0.0, -0.4];
        let fer = fer_loss(&logits, 3, Some(&uniform), 10, &spec).unwrap();
        let lsr = lsr_loss(&logits, 3, eps).unwrap();
        for (a, b) in fer.grad.iter().zip(&lsr.grad) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn method_names_parse() {
        #[derive(Deserialize)]
        struct W {
            m: Method,
        }
        let w: W = toml::from_str("m = \"maxent\"").unwrap();
        assert_eq!(w.m, Method::MaxEnt);
        let w: W = toml::from_str("m = \"fer\"").unwrap();
        assert_eq!(w.m, Method::Fer);
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, usize, ProbVector)> {
        (2usize..7).prop_flat_map(|k| {
            (
                prop::collection::vec(-4.0f64..4.0, k),
                0..k,
                prop::collection::vec(0.01f64..1.0, k).prop_map(|raw| {
                    let s: f64 = raw.iter().sum();
                    ProbVector::new(raw.iter().map(|x| x / s).collect()).unwrap()
                }),
            )
        })
    }

    fn check(spec: &LossSpec, logits: &[f64], class: usize, target: Option<&ProbVector>, epoch: usize) -> f64 {
        let loss = spec.per_sample(logits, class, target, epoch).unwrap();
        let f = |z: &[f64]| spec.per_sample(z, class, target, epoch).unwrap().value;
        finite_diff_check(f, &loss.grad, logits, 1e-5).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn std_gradient(( logits, class, _t) in case()) {
            let spec = LossSpec::default();
            prop_assert!(check(&spec, &logits, class, None, 0) <= 1e-5);
        }

        #[test]
        fn fer_gradient(
            (logits, class, target) in case(),
            tau in prop::sample::select(vec![1.0, 2.0, 5.0, 10.0]),
            epoch in 0usize..=20,
            reverse in any::<bool>(),
            tau_squared in any::<bool>(),
        ) {
            let spec = LossSpec {
                kl_direction: if reverse { KlDirection::ModelTarget } else { KlDirection::TargetModel },
                tau_squared,
                ..fer_spec(tau, 20, 0.9)
            };
            prop_assert!(check(&spec, &logits, class, Some(&target), epoch) <= 1e-5);
        }

        #[test]
        fn lsr_gradient((logits, class, _t) in case(), eps in 0.0f64..0.5) {
            let spec = LossSpec { method: Method::Lsr, epsilon: eps, ..LossSpec::default() };
            prop_assert!(check(&spec, &logits, class, None, 0) <= 1e-5);
        }

        #[test]
        fn maxent_gradient((logits, class, _t) in case(), lambda in 0.0f64..2.0) {
            let spec = LossSpec { method: Method::MaxEnt, lambda, ..LossSpec::default() };
            prop_assert!(check(&spec, &logits, class, None, 0) <= 1e-5);
        }

        #[test]
        fn gate_identity((logits, class, _t) in case(), epoch in 0usize..=20) {
            let spec = fer_spec(5.0, 20, 0.9);
            prop_assert_eq!(fer_loss(&logits, class, None, epoch, &spec).unwrap(), std_loss(&logits, class).unwrap());
        }

        #[test]
        fn schedule_properties(total in 1usize..200, rho in 0.0f64..=1.0) {
            let mut prev_beta = -1.0;
            for k in 0..=total {
                let (a, b) = alpha_beta(k, total, rho).unwrap();
                prop_assert!((a + b - 1.0).abs() < 1e-15);
                prop_assert!(a >= 1.0 - rho - 1e-15 && a <= 1.0);
                prop_assert!(b >= prev_beta);
                prev_beta = b;
            }
        }

        #[test]
        fn lsr_equivalence((logits, class, _t) in case(), eps in 0.0f64..0.9) {
            let k = logits.len();
            let spec = LossSpec { no_gate: true, ..fer_spec(1.0, 10, eps) };
            let fer = fer_loss(&logits, class, Some(&ProbVector::uniform(k)), 10, &spec).unwrap();
            let lsr = lsr_loss(&logits, class, eps).unwrap();
            for (a, b) in fer.grad.iter().zip(&lsr.grad) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
