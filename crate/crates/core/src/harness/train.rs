//! The per-seed training loop.
//!
//! For every epoch `k`: shuffle the training split with a generator seeded
//! from `(seed, k)`, then for every mini-batch run the forward pass, build
//! each sample's loss (reading its remembered behavior first), backpropagate,
//! step the optimizer and fold the batch's pre-update outputs into the
//! behavior memory. After the epoch the test split is evaluated and its
//! correctness column appended to the prediction history.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Capture, DataFormat, ExperimentConfig};
use crate::behavior_memory::{BehaviorMemory, MemoryConfig};
use crate::data::{make_blobs, Dataset, NoiseSpec, Schema, Standardizer};
use crate::error::{FerError, Result};
use crate::losses::{alpha_beta, Method};
use crate::metrics::{accuracy, FlipReport, PredictionHistory};
use crate::model::{sgd_step, MlpModel, OptimizerState};

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub eval_accuracy: f64,
    pub fe: f64,
    pub rfe: f64,
    pub wfs_count: usize,
    /// Samples whose loss used the behavior-consistency branch.
    pub regularized_count: usize,
    /// Memory entries holding a target when the epoch began.
    pub memory_targets: usize,
    /// Kept out of the metrics stream so that it stays reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Everything one seed produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub history: PredictionHistory,
    pub final_report: FlipReport,
    /// Epoch with the best validation accuracy (earliest on ties); the best
    /// test accuracy epoch when there is no validation split.
    pub best_epoch: usize,
    pub best_report: FlipReport,
    pub best_test_accuracy: f64,
    pub model: MlpModel,
    pub memory: Option<BehaviorMemory>,
    pub dataset: Dataset,
    pub standardizer: Option<Standardizer>,
}

impl RunResult {
    pub fn last_test_accuracy(&self) -> f64 {
        self.final_report.accuracy
    }
}

/// Loads the configured data source (unsplit, noise-free).
pub fn load_source(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match cfg.data_format {
        DataFormat::Delimited => {
            let schema = Schema {
                delimiter: cfg.delimiter,
                label_column: cfg.label_column,
                feature_columns: cfg.feature_columns.clone(),
                header: cfg.header,
            };
            Dataset::load_delimited(data_path(cfg)?, &schema)
        }
        DataFormat::Arcene => Dataset::load_arcene(data_path(cfg)?),
        DataFormat::Blobs => make_blobs(
            cfg.blobs_classes,
            cfg.blobs_per_class,
            cfg.blobs_dim,
            cfg.blobs_separation,
            cfg.blobs_seed.unwrap_or(seed),
        ),
    }
}

fn data_path(cfg: &ExperimentConfig) -> Result<&std::path::Path> {
    cfg.data_path
        .as_deref()
        .ok_or_else(|| FerError::Config("data_path is required".into()))
}

/// Splits, standardizes and corrupts `source` as configured for `seed`.
pub fn prepare_dataset(cfg: &ExperimentConfig, source: Dataset, seed: u64) -> Result<(Dataset, Option<Standardizer>)> {
    let ds = if cfg.data_format == DataFormat::Arcene {
        source
    } else {
        source.split(cfg.split, cfg.split_seed.unwrap_or(seed))?
    };
    let (ds, stats) = if cfg.standardize {
        let (ds, s) = ds.standardize()?;
        (ds, Some(s))
    } else {
        (ds, None)
    };
    let ds = match cfg.noise_rate {
        Some(rate) => ds.inject_noise(&NoiseSpec {
            rate,
            seed: cfg.noise_seed.unwrap_or(seed),
            exclude_true: cfg.noise_exclude_true,
        })?,
        None => ds,
    };
    Ok((ds, stats))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains one seed on an already prepared dataset.
pub fn train_seed(
    cfg: &ExperimentConfig,
    dataset: Dataset,
    standardizer: Option<Standardizer>,
    seed: u64,
) -> Result<RunResult> {
    let spec = cfg.loss_spec();
    spec.validate()?;
    let k = dataset.class_count();
    if k < 2 {
        return Err(FerError::Config("dataset needs at least two classes".into()));
    }
    let train_ids = dataset.splits.train.clone();
    if train_ids.is_empty() {
        return Err(FerError::Config("training split is empty".into()));
    }
    let train_x = dataset.rows(&train_ids);
    let train_y = dataset.labels_of(&train_ids);
    let test_x = dataset.rows(&dataset.splits.test);
    let test_y = dataset.labels_of(&dataset.splits.test);
    let val_x = dataset.rows(&dataset.splits.val);
    let val_y = dataset.labels_of(&dataset.splits.val);

    let mut sizes = vec![dataset.dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(k);
    let mut model = MlpModel::new(&sizes, seed)?;
    let mut opt = OptimizerState::new(&model, cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;

    let uses_memory = spec.method == Method::Fer;
    let unconditional = spec.unconditional_updates();
    let mut memory = if uses_memory {
        Some(BehaviorMemory::new(
            train_ids.len(),
            k,
            MemoryConfig {
                tau: spec.tau,
                mu: spec.mu,
                average: !spec.no_average,
                unconditional,
            },
        )?)
    } else {
        None
    };

    let mut history = PredictionHistory::new(test_y.len());
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut val_accs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_ids.len()).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        opt.learning_rate = cfg.learning_rate_at(epoch);
        let (alpha, beta) = alpha_beta(epoch, spec.total_epochs, spec.rho)?;
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(seed, epoch));

        let memory_targets = memory.as_ref().map_or(0, BehaviorMemory::target_count);
        let mut regularized = 0usize;
        let mut loss_sum = 0.0;
        let mut hits = 0usize;

        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_x.select(ndarray::Axis(0), batch);
            let out = model.forward(&x)?;
            let mut upstream = Array2::<f64>::zeros(out.logits.dim());
            let mut logit_rows = Vec::with_capacity(batch.len());
            for (row, &id) in batch.iter().enumerate() {
                let logits = out.row(row);
                let target = match &memory {
                    Some(m) => m.target_for(id)?,
                    None => None,
                };
                regularized += usize::from(target.is_some());
                let loss = spec.per_sample(&logits, train_y[id], target.as_ref(), epoch)?;
                if !loss.value.is_finite() || loss.grad.iter().any(|g| !g.is_finite()) {
                    return Err(FerError::Diverged {
                        epoch,
                        batch: batch_no,
                        message: format!("non-finite loss {} for training sample {id}", loss.value),
                    });
                }
                loss_sum += loss.value;
                hits += usize::from(crate::numerics::argmax(&logits) == train_y[id]);
                upstream.row_mut(row).assign(&ndarray::ArrayView1::from(&loss.grad));
                logit_rows.push(logits);
            }
            let grads = model.backward(&out, &upstream)?;
            sgd_step(&mut model, &mut opt, &grads).map_err(|e| FerError::Diverged {
                epoch,
                batch: batch_no,
                message: e.to_string(),
            })?;
            if cfg.capture == Capture::TrainPass {
                if let Some(m) = memory.as_mut() {
                    for (&id, logits) in batch.iter().zip(&logit_rows) {
                        observe(m, unconditional, id, logits, train_y[id], epoch)?;
                    }
                }
            }
        }

        if regularized != memory_targets {
            return Err(FerError::Invariant(format!(
                "epoch {epoch}: {regularized} samples used the regularizer but {memory_targets} memory entries held targets"
            )));
        }

        if cfg.capture == Capture::EvalPass {
            if let Some(m) = memory.as_mut() {
                let out = model.forward(&train_x)?;
                for (id, &y) in train_y.iter().enumerate() {
                    observe(m, unconditional, id, &out.row(id), y, epoch)?;
                }
            }
        }

        let test_pred = model.predict(&test_x)?;
        history.record_epoch(&test_pred, &test_y)?;
        let report = history.flip_report(epoch)?;
        let val_accuracy = if val_y.is_empty() {
            None
        } else {
            Some(accuracy(&model.predict(&val_x)?, &val_y)?)
        };
        val_accs.push(val_accuracy);
        records.push(EpochRecord {
            seed,
            epoch,
            learning_rate: opt.learning_rate,
            alpha,
            beta,
            train_loss: loss_sum / train_ids.len() as f64,
            train_accuracy: hits as f64 / train_ids.len() as f64,
            val_accuracy,
            eval_accuracy: report.accuracy,
            fe: report.fe,
            rfe: report.rfe,
            wfs_count: report.n_wfs,
            regularized_count: regularized,
            memory_targets,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    let last = cfg.epochs - 1;
    let final_report = history.flip_report(last)?;
    let select_by = |r: &EpochRecord| r.val_accuracy.unwrap_or(r.eval_accuracy);
    let mut best_epoch = 0;
    for r in &records {
        if select_by(r) > select_by(&records[best_epoch]) {
            best_epoch = r.epoch;
        }
    }
    let best_report = history.flip_report(best_epoch)?;
    let best_test_accuracy = records.iter().map(|r| r.eval_accuracy).fold(0.0, f64::max);

    Ok(RunResult {
        seed,
        records,
        history,
        final_report,
        best_epoch,
        best_report,
        best_test_accuracy,
        model,
        memory,
        dataset,
        standardizer,
    })
}

fn observe(
    m: &mut BehaviorMemory,
    unconditional: bool,
    id: usize,
    logits: &[f64],
    y: usize,
    epoch: usize,
) -> Result<()> {
    if unconditional {
        m.observe_unconditional(id, logits, y, epoch)?;
    } else {
        m.observe(id, logits, y, epoch)?;
    }
    Ok(())
}

/// Loads, prepares and trains a single seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    let source = load_source(cfg, seed)?;
    let (ds, stats) = prepare_dataset(cfg, source, seed)?;
    train_seed(cfg, ds, stats, seed)
}
