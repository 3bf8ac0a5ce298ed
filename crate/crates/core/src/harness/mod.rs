//! Experiment orchestration: multi-seed runs, artifacts and comparisons.
//!
//! A run writes, under its output directory:
//!
//! ```text
//! config.toml            resolved config
//! summary.csv            method,metric,mean,std,seed_<s>...
//! seed-<s>/metrics.jsonl one JSON object per epoch (EpochRecord)
//! seed-<s>/timings.csv   epoch,wall_time_s
//! seed-<s>/history.txt   test-split correctness per epoch
//! seed-<s>/flip.json     final-epoch and best-epoch flip reports
//! seed-<s>/manifest.json label mapping, split indices, noisy rows
//! seed-<s>/model.bin     model checkpoint
//! seed-<s>/memory.bin    behavior-memory snapshot (fer only)
//! ```

mod config;
mod train;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

pub use config::{Capture, DataFormat, ExperimentConfig, OUTPUT_ROOT_ENV};
pub use train::{load_source, prepare_dataset, run_seed, train_seed, EpochRecord, RunResult};

use crate::error::{FerError, Result};
use crate::metrics::FlipReport;

/// Per-seed results for one config.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub label: String,
    pub runs: Vec<RunResult>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

/// Metrics reported per seed in summaries and comparisons.
pub const SUMMARY_METRICS: [&str; 7] = [
    "last_accuracy",
    "selected_accuracy",
    "best_accuracy",
    "last_fe",
    "last_rfe",
    "selected_fe",
    "selected_rfe",
];

impl ExperimentResult {
    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect()
    }

    /// Per-seed values of a metric from [`SUMMARY_METRICS`].
    pub fn metric(&self, name: &str) -> Vec<f64> {
        self.runs
            .iter()
            .map(|r| match name {
                "last_accuracy" => r.final_report.accuracy,
                "selected_accuracy" => r.best_report.accuracy,
                "best_accuracy" => r.best_test_accuracy,
                "last_fe" => r.final_report.fe,
                "last_rfe" => r.final_report.rfe,
                "selected_fe" => r.best_report.fe,
                "selected_rfe" => r.best_report.rfe,
                other => panic!("unknown metric {other}"),
            })
            .collect()
    }

    pub fn last_accuracies(&self) -> Vec<f64> {
        self.metric("last_accuracy")
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,metric,mean,std");
        for s in self.seeds() {
            let _ = write!(out, ",seed_{s}");
        }
        out.push('\n');
        for m in SUMMARY_METRICS {
            let values = self.metric(m);
            let ms = MeanStd::of(&values);
            let _ = write!(out, "{},{m},{:.6},{:.6}", self.label, ms.mean, ms.std);
            for v in values {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every configured seed and, when an output directory is configured,
/// writes the run artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let runs = if cfg.parallel_seeds && cfg.seeds.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .seeds
                .iter()
                .map(|&seed| scope.spawn(move || run_seed(cfg, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        cfg.seeds
            .iter()
            .map(|&s| run_seed(cfg, s))
            .collect::<Result<Vec<_>>>()?
    };
    let result = ExperimentResult {
        label: cfg.label(),
        runs,
    };
    if let Some(dir) = cfg.resolved_output_dir() {
        write_artifacts(cfg, &result, &dir)?;
    }
    Ok(result)
}

/// One JSON object per line, one line per epoch.
pub fn metrics_stream(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct FlipFile<'a> {
    final_epoch: &'a FlipReport,
    best_epoch: &'a FlipReport,
    best_test_accuracy: f64,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| FerError::io(path, e))
}

pub fn write_artifacts(cfg: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FerError::io(dir, e))?;
    write(&dir.join("config.toml"), cfg.to_toml())?;
    write(&dir.join("summary.csv"), result.summary_csv())?;
    for run in &result.runs {
        let sub = dir.join(format!("seed-{}", run.seed));
        fs::create_dir_all(&sub).map_err(|e| FerError::io(&sub, e))?;
        write(&sub.join("metrics.jsonl"), metrics_stream(&run.records))?;
        let mut timings = String::from("epoch,wall_time_s\n");
        for r in &run.records {
            let _ = writeln!(timings, "{},{:.6}", r.epoch, r.wall_time_s);
        }
        write(&sub.join("timings.csv"), timings)?;
        run.history.save(&sub.join("history.txt"))?;
        let flips = FlipFile {
            final_epoch: &run.final_report,
            best_epoch: &run.best_report,
            best_test_accuracy: run.best_test_accuracy,
        };
        write(
            &sub.join("flip.json"),
            serde_json::to_string_pretty(&flips).expect("serializable"),
        )?;
        let source = cfg
            .data_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "make_blobs".to_string());
        let manifest = run.dataset.manifest(&source, run.standardizer.as_ref());
        write(
            &sub.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("serializable"),
        )?;
        run.model.save(&sub.join("model.bin"))?;
        if let Some(mem) = &run.memory {
            let path = sub.join("memory.bin");
            let mut f = fs::File::create(&path).map_err(|e| FerError::io(&path, e))?;
            mem.write_snapshot(&mut f).map_err(|e| FerError::io(&path, e))?;
            f.flush().map_err(|e| FerError::io(&path, e))?;
        }
    }
    Ok(())
}

/// One method's row in a comparison.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub accuracy: MeanStd,
    pub fe: MeanStd,
    pub rfe: MeanStd,
    pub per_seed_accuracy: Vec<f64>,
    /// Per-seed last-epoch accuracy minus the baseline's (first config).
    pub delta_vs_baseline: Vec<f64>,
    pub mean_delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

/// Pairs results seed by seed; the first result is the baseline.
pub fn compare_results(results: &[ExperimentResult]) -> Result<Comparison> {
    let Some(base) = results.first() else {
        return Err(FerError::Pairing("nothing to compare".into()));
    };
    let seeds = base.seeds();
    for r in results {
        if r.seeds() != seeds {
            return Err(FerError::Pairing(format!(
                "{} ran seeds {:?}, baseline {} ran {:?}",
                r.label,
                r.seeds(),
                base.label,
                seeds
            )));
        }
    }
    let base_acc = base.last_accuracies();
    let rows = results
        .iter()
        .map(|r| {
            let acc = r.last_accuracies();
            let delta: Vec<f64> = acc.iter().zip(&base_acc).map(|(a, b)| a - b).collect();
            ComparisonRow {
                label: r.label.clone(),
                accuracy: MeanStd::of(&acc),
                fe: MeanStd::of(&r.metric("last_fe")),
                rfe: MeanStd::of(&r.metric("last_rfe")),
                mean_delta: MeanStd::of(&delta).mean,
                per_seed_accuracy: acc,
                delta_vs_baseline: delta,
            }
        })
        .collect();
    Ok(Comparison { seeds, rows })
}

/// Checks that configs share data and seeds, then runs and pairs them.
pub fn compare(cfgs: &[ExperimentConfig]) -> Result<Comparison> {
    let Some(first) = cfgs.first() else {
        return Err(FerError::Pairing("nothing to compare".into()));
    };
    for c in cfgs {
        let same_data = c.data_format == first.data_format
            && c.data_path == first.data_path
            && c.split == first.split
            && c.split_seed == first.split_seed
            && c.blobs_seed == first.blobs_seed
            && (c.blobs_classes, c.blobs_per_class, c.blobs_dim)
                == (first.blobs_classes, first.blobs_per_class, first.blobs_dim)
            && c.blobs_separation == first.blobs_separation;
        if !same_data {
            return Err(FerError::Pairing(format!(
                "{} uses a different dataset or split than {}",
                c.label(),
                first.label()
            )));
        }
        if c.seeds != first.seeds {
            return Err(FerError::Pairing(format!(
                "{} uses seeds {:?}, {} uses {:?}",
                c.label(),
                c.seeds,
                first.label(),
                first.seeds
            )));
        }
    }
    let results = cfgs.iter().map(run_experiment).collect::<Result<Vec<_>>>()?;
    compare_results(&results)
}

impl Comparison {
    /// Delimited table: `method,mean_acc,std_acc,mean_fe,mean_rfe,mean_delta,acc_seed_<s>...,delta_seed_<s>...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mean_acc,std_acc,mean_fe,std_fe,mean_rfe,std_rfe,mean_delta");
        for s in &self.seeds {
            let _ = write!(out, ",acc_seed_{s}");
        }
        for s in &self.seeds {
            let _ = write!(out, ",delta_seed_{s}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.label, r.accuracy.mean, r.accuracy.std, r.fe.mean, r.fe.std, r.rfe.mean, r.rfe.std, r.mean_delta
            );
            for v in r.per_seed_accuracy.iter().chain(&r.delta_vs_baseline) {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}
