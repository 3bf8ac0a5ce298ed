//! Experiment configuration.
//!
//! Configs are flat TOML documents; unknown keys are rejected. Relative paths
//! resolve against the directory holding the config file. Every key except
//! the data source has a default:
//!
//! ```toml
//! name = "iris-fer"
//! data_format = "delimited"      # delimited | arcene | blobs
//! data_path = "../data/iris.data"
//! delimiter = "comma"            # comma | whitespace
//! label_column = -1
//! header = false
//! split = [0.6, 0.2, 0.2]        # train / val / test, stratified
//! # split_seed = 0               # defaults to the run seed
//! standardize = true
//!
//! method = "fer"                 # std | fer | lsr | maxent
//! tau = 5.0
//! mu = 1.0
//! rho = 0.9
//! epsilon = 0.1
//! lambda = 0.5
//! no_gate = false
//! no_average = false
//! noisy = false
//! tau_squared = false
//! kl_direction = "target-model"  # target-model | model-target
//! capture = "train-pass"         # train-pass | eval-pass
//!
//! hidden = [128, 128]
//! epochs = 100
//! batch_size = 32
//! learning_rate = 0.1
//! momentum = 0.9
//! weight_decay = 5e-4
//! lr_milestones = [0.5, 0.75]
//! lr_decay = 0.1
//! seeds = [0, 1, 2, 3, 4]
//!
//! # noise_rate = 0.6             # optional label noise on the train split
//! # noise_seed = 0               # defaults to the run seed
//! # output_dir = "runs/iris-fer" # defaults to $FER_OUTPUT_ROOT/<name>
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Delimiter;
use crate::error::{FerError, Result};
use crate::losses::{KlDirection, LossSpec, Method};

/// Environment variable naming the root directory for run outputs.
pub const OUTPUT_ROOT_ENV: &str = "FER_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Delimited,
    Arcene,
    Blobs,
}

/// When behaviors are written into the memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capture {
    /// From the training forward pass, before the batch's update.
    #[default]
    TrainPass,
    /// From a separate pass over the training set after each epoch.
    EvalPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: Option<String>,

    pub data_format: DataFormat,
    pub data_path: Option<PathBuf>,
    pub delimiter: Delimiter,
    pub label_column: isize,
    pub feature_columns: Option<Vec<usize>>,
    pub header: bool,
    pub split: [f64; 3],
    pub split_seed: Option<u64>,
    pub standardize: bool,

    pub blobs_classes: usize,
    pub blobs_per_class: usize,
    pub blobs_dim: usize,
    pub blobs_separation: f64,
    pub blobs_seed: Option<u64>,

    pub method: Method,
    pub tau: f64,
    pub mu: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub no_gate: bool,
    pub no_average: bool,
    pub noisy: bool,
    pub tau_squared: bool,
    pub kl_direction: KlDirection,
    pub capture: Capture,

    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub seeds: Vec<u64>,

    pub noise_rate: Option<f64>,
    pub noise_seed: Option<u64>,
    pub noise_exclude_true: bool,

    pub output_dir: Option<PathBuf>,
    /// Run seeds on separate threads. Each run stays single-threaded.
    pub parallel_seeds: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: None,
            data_format: DataFormat::Delimited,
            data_path: None,
            delimiter: Delimiter::Comma,
            label_column: -1,
            feature_columns: None,
            header: false,
            split: [0.6, 0.2, 0.2],
            split_seed: None,
            standardize: true,
            blobs_classes: 4,
            blobs_per_class: 100,
            blobs_dim: 2,
            blobs_separation: 2.0,
            blobs_seed: None,
            method: Method::Std,
            tau: 5.0,
            mu: 1.0,
            rho: 0.9,
            epsilon: 0.1,
            lambda: 0.5,
            no_gate: false,
            no_average: false,
            noisy: false,
            tau_squared: false,
            kl_direction: KlDirection::TargetModel,
            capture: Capture::TrainPass,
            hidden: vec![128, 128],
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            seeds: vec![0, 1, 2, 3, 4],
            noise_rate: None,
            noise_seed: None,
            noise_exclude_true: false,
            output_dir: None,
            parallel_seeds: false,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file, resolving relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FerError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating or resolving paths.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FerError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data_path, &mut self.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Display label, e.g. `fer` or `fer-no-gate`.
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut s = self.method.name().to_string();
        if self.method == Method::Fer {
            if self.no_gate {
                s.push_str("-no-gate");
            }
            if self.no_average {
                s.push_str("-no-average");
            }
            if self.noisy {
                s.push_str("-noisy");
            }
        }
        s
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            method: self.method,
            tau: self.tau,
            mu: self.mu,
            epsilon: self.epsilon,
            lambda: self.lambda,
            total_epochs: self.epochs,
            rho: self.rho,
            no_gate: self.no_gate,
            no_average: self.no_average,
            noisy: self.noisy,
            tau_squared: self.tau_squared,
            kl_direction: self.kl_direction,
        }
    }

    /// Output directory, falling back to `$FER_OUTPUT_ROOT/<label>`.
    pub fn resolved_output_dir(&self) -> Option<PathBuf> {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(|root| PathBuf::from(root).join(self.label())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FerError::Config(m));
        match self.data_format {
            DataFormat::Delimited | DataFormat::Arcene => match &self.data_path {
                None => return bad("data_path is required for file-backed datasets".into()),
                Some(p) if !p.exists() => return bad(format!("data_path {} does not exist", p.display())),
                Some(_) => {}
            },
            DataFormat::Blobs => {
                if self.blobs_classes < 2 || self.blobs_per_class == 0 || self.blobs_dim == 0 {
                    return bad("blobs need >= 2 classes and positive size and dimension".into());
                }
                if !(self.blobs_separation >= 0.0) {
                    return bad("blobs_separation must be >= 0".into());
                }
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.hidden.contains(&0) {
            return bad(format!("hidden layer widths must be positive: {:?}", self.hidden));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad(format!(
                "lr_milestones must be fractions in [0, 1]: {:?}",
                self.lr_milestones
            ));
        }
        if !(self.lr_decay > 0.0) {
            return bad(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        if let Some(r) = self.noise_rate {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("noise_rate must be in [0, 1], got {r}"));
            }
        }
        if self.noisy && self.method != Method::Fer {
            return bad("noisy mode only applies to method = \"fer\"".into());
        }
        let split_sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (split_sum - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must sum to 1", self.split));
        }
        self.loss_spec().validate()
    }

    /// Learning rate in effect during `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|m| epoch >= (**m * self.epochs as f64).round() as usize)
            .count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}
