//! Training lab for flipping-error reduction on small fully-connected networks.
//!
//! The crate bundles the pieces needed to train an MLP with the gated
//! behavior-consistency objective and to measure how often correctly learned
//! samples are later forgotten:
//!
//! * [`numerics`]: stable softmax / log-softmax, cross-entropy, KL, entropy and a
//!   central-difference gradient checker.
//! * [`model`]: ReLU MLP with a hand-derived backward pass and momentum SGD.
//! * [`behavior_memory`]: per-sample running average of correct output distributions.
//! * [`losses`]: STD, FER, label smoothing and max-entropy objectives.
//! * [`metrics`]: per-epoch correctness history, accuracy and flip errors.
//! * [`data`]: delimited-file loading, stratified splits, label noise, blobs.
//! * [`gradcheck`]: central-difference checks of every analytic gradient.
//! * [`harness`]: configs, the training loop, artifacts and comparisons.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod behavior_memory;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use behavior_memory::{BehaviorEntry, BehaviorMemory, MemoryConfig};
pub use data::{make_blobs, Dataset, Delimiter, NoiseSpec, Schema, Splits};
pub use error::{FerError, Result};
pub use gradcheck::{GradCheckReport, GRADCHECK_TOLERANCE};
pub use harness::{compare, run_experiment, Comparison, EpochRecord, ExperimentConfig, ExperimentResult, RunResult};
pub use losses::{alpha_beta, KlDirection, LossSpec, Method, PerSampleLoss};
pub use metrics::{accuracy, FlipReport, PredictionHistory};
pub use model::{BatchOutput, Gradients, MlpModel, OptimizerState};
pub use numerics::{ProbVector, PROB_FLOOR};
