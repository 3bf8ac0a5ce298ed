//! Central-difference checks of every analytic gradient in the crate.
//!
//! Two layers are checked: each loss's gradient with respect to the logits,
//! and the full backward pass of a small MLP under each composite loss
//! (gradient with respect to every parameter, averaged over a batch).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{KlDirection, LossSpec, Method};
use crate::model::MlpModel;
use crate::numerics::{finite_diff_check, ProbVector};

/// Largest relative error accepted by [`GradCheckReport::passed`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckCase {
    pub name: String,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < GRADCHECK_TOLERANCE
    }
}

fn random_target(rng: &mut ChaCha8Rng, k: usize) -> ProbVector {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    ProbVector::new(raw.into_iter().map(|x| x / total).collect()).expect("normalized")
}

fn loss_variants() -> Vec<(&'static str, LossSpec)> {
    let base = LossSpec {
        total_epochs: 10,
        ..LossSpec::default()
    };
    vec![
        (
            "std",
            LossSpec {
                method: Method::Std,
                ..base
            },
        ),
        (
            "fer",
            LossSpec {
                method: Method::Fer,
                ..base
            },
        ),
        (
            "fer-tau1",
            LossSpec {
                method: Method::Fer,
                tau: 1.0,
                ..base
            },
        ),
        (
            "fer-tau-squared",
            LossSpec {
                method: Method::Fer,
                tau_squared: true,
                ..base
            },
        ),
        (
            "fer-model-target",
            LossSpec {
                method: Method::Fer,
                kl_direction: KlDirection::ModelTarget,
                ..base
            },
        ),
        (
            "lsr",
            LossSpec {
                method: Method::Lsr,
                ..base
            },
        ),
        (
            "maxent",
            LossSpec {
                method: Method::MaxEnt,
                ..base
            },
        ),
    ]
}

/// Checks each loss's logit gradient at `trials` random points.
pub fn check_losses(seed: u64, trials: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for (name, spec) in loss_variants() {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let k = rng.random_range(2..=6);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            let class = rng.random_range(0..k);
            let epoch = rng.random_range(0..=spec.total_epochs);
            let target = random_target(&mut rng, k);
            let analytic = spec.per_sample(&logits, class, Some(&target), epoch)?.grad;
            let f = |z: &[f64]| {
                spec.per_sample(z, class, Some(&target), epoch)
                    .map(|l| l.value)
                    .unwrap_or(f64::NAN)
            };
            worst = worst.max(finite_diff_check(f, &analytic, &logits, STEP)?);
        }
        report.cases.push(GradCheckCase {
            name: format!("loss/{name}"),
            max_error: worst,
        });
    }
    Ok(report)
}

/// Mean loss of a batch and its gradient w.r.t. the logits, targets held fixed.
fn batch_loss(
    model: &MlpModel,
    x: &Array2<f64>,
    labels: &[usize],
    targets: &[Option<ProbVector>],
    spec: &LossSpec,
    epoch: usize,
) -> Result<(f64, Array2<f64>)> {
    let out = model.forward(x)?;
    let mut upstream = Array2::zeros(out.logits.dim());
    let mut total = 0.0;
    for (i, (&y, t)) in labels.iter().zip(targets).enumerate() {
        let l = spec.per_sample(&out.row(i), y, t.as_ref(), epoch)?;
        total += l.value;
        for (j, g) in l.grad.iter().enumerate() {
            upstream[[i, j]] = *g;
        }
    }
    Ok((total / labels.len() as f64, upstream))
}

/// Checks the parameter gradient of a random MLP under one loss.
pub fn check_network(spec: &LossSpec, sizes: &[usize], batch: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut model = MlpModel::new(sizes, seed)?;
    // zero biases behind a fully dead layer would sit exactly on the ReLU kink
    let jittered: Vec<f64> = model
        .parameters()
        .iter()
        .map(|p| p + rng.random_range(-0.1..0.1))
        .collect();
    model.set_parameters(&jittered)?;
    let d = sizes[0];
    let k = *sizes.last().expect("sizes are non-empty");
    let x = Array2::from_shape_fn((batch, d), |_| rng.random_range(-2.0..2.0));
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
    // some samples without a target so the gated branch is exercised too
    let targets: Vec<Option<ProbVector>> = (0..batch)
        .map(|_| rng.random_bool(0.7).then(|| random_target(&mut rng, k)))
        .collect();
    let epoch = rng.random_range(0..=spec.total_epochs);

    let (_, upstream) = batch_loss(&model, &x, &labels, &targets, spec, epoch)?;
    let analytic = model.backward(&model.forward(&x)?, &upstream)?.flatten();
    let point = model.parameters();
    let f = |theta: &[f64]| {
        let mut probe = model.clone();
        probe
            .set_parameters(theta)
            .and_then(|_| batch_loss(&probe, &x, &labels, &targets, spec, epoch))
            .map(|(v, _)| v)
            .unwrap_or(f64::NAN)
    };
    finite_diff_check(f, &analytic, &point, STEP)
}

/// The full suite: loss gradients plus 20 network configurations.
pub fn run_suite(seed: u64) -> Result<GradCheckReport> {
    let mut report = check_losses(seed, 25)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let variants = loss_variants();
    for i in 0..20 {
        let (name, spec) = &variants[i % variants.len()];
        let depth = rng.random_range(0..=2);
        let mut sizes = vec![rng.random_range(1..=5)];
        for _ in 0..depth {
            sizes.push(rng.random_range(2..=8));
        }
        sizes.push(rng.random_range(2..=4));
        let batch = rng.random_range(1..=6);
        let err = check_network(spec, &sizes, batch, rng.random())?;
        report.cases.push(GradCheckCase {
            name: format!("network/{name}/{sizes:?}x{batch}"),
            max_error: err,
        });
    }
    Ok(report)
}
