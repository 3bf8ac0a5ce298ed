//! Per-sample memory of past correct behaviors.
//!
//! Each training sample owns one entry holding the ever-correct flag and the
//! confidence-weighted running average `b_hat` of its tempered output
//! distributions. An update with behavior `b` and confidence `c` (the
//! untempered probability of the true class) is
//!
//! ```text
//! b_hat <- exp(-mu c) * b_hat + (1 - exp(-mu c)) * b
//! ```
//!
//! and the first update initializes `b_hat <- b`.
//!
//! Storage is a flat `n x K` array plus per-entry metadata, kept on the host.
//!
//! # Snapshot layout
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      8 bytes  b"FERBMEM\0"
//! version    u32      1
//! n          u64
//! K          u64
//! tau        f64
//! mu         f64
//! mode       u8       bit 0: averaging on, bit 1: unconditional updates allowed
//! n entries:
//!   flags    u8       bit 0: ever correct, bit 1: has target
//!   count    u64      number of correct observations
//!   epoch    i64      last update epoch, -1 if never updated
//!   b_hat    K x f64
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{FerError, Result};
use crate::numerics::{argmax, check_class, softmax_temp, ProbVector};

const SNAPSHOT_MAGIC: &[u8; 8] = b"FERBMEM\0";
const SNAPSHOT_VERSION: u32 = 1;

/// How entries are updated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryConfig {
    /// Temperature of the stored behavior.
    pub tau: f64,
    /// Confidence scale.
    pub mu: f64,
    /// Keep a weighted average; when false only the latest behavior is kept.
    pub average: bool,
    /// Allow [`BehaviorMemory::observe_unconditional`].
    pub unconditional: bool,
}

impl MemoryConfig {
    pub fn new(tau: f64, mu: f64) -> Self {
        MemoryConfig {
            tau,
            mu,
            average: true,
            unconditional: false,
        }
    }
}

/// Read-only view of one sample's entry.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorEntry {
    pub ever_correct: bool,
    pub b_hat: Option<ProbVector>,
    pub correct_count: u64,
    pub last_update_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorMemory {
    config: MemoryConfig,
    classes: usize,
    b_hat: Vec<f64>,
    has_target: Vec<bool>,
    ever_correct: Vec<bool>,
    correct_count: Vec<u64>,
    last_epoch: Vec<Option<usize>>,
}

impl BehaviorMemory {
    pub fn new(samples: usize, classes: usize, config: MemoryConfig) -> Result<Self> {
        if classes < 2 {
            return Err(FerError::InvalidParameter(format!(
                "behavior memory needs at least 2 classes, got {classes}"
            )));
        }
        if !(config.tau > 0.0) || !config.tau.is_finite() {
            return Err(FerError::InvalidParameter(format!(
                "tau must be positive, got {}",
                config.tau
            )));
        }
        if !(config.mu >= 0.0) {
            return Err(FerError::InvalidParameter(format!(
                "mu must be >= 0, got {}",
                config.mu
            )));
        }
        Ok(BehaviorMemory {
            config,
            classes,
            b_hat: vec![0.0; samples * classes],
            has_target: vec![false; samples],
            ever_correct: vec![false; samples],
            correct_count: vec![0; samples],
            last_epoch: vec![None; samples],
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.has_target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.len() {
            return Err(FerError::Index {
                index: id,
                len: self.len(),
            });
        }
        Ok(())
    }

    fn row(&self, id: usize) -> &[f64] {
        &self.b_hat[id * self.classes..(id + 1) * self.classes]
    }

    pub fn entry(&self, id: usize) -> Result<BehaviorEntry> {
        self.check_id(id)?;
        Ok(BehaviorEntry {
            ever_correct: self.ever_correct[id],
            b_hat: self.target_for(id)?,
            correct_count: self.correct_count[id],
            last_update_epoch: self.last_epoch[id],
        })
    }

    /// Gated update: only a correct prediction is folded into the average.
    ///
    /// Returns whether the prediction was correct.
    pub fn observe(&mut self, id: usize, logits: &[f64], true_class: usize, epoch: usize) -> Result<bool> {
        self.check_id(id)?;
        self.check_logit_width(logits, true_class)?;
        if argmax(logits) != true_class {
            return Ok(false);
        }
        self.fold_logits(id, logits, true_class, epoch)?;
        self.ever_correct[id] = true;
        self.correct_count[id] += 1;
        Ok(true)
    }

    /// Ungated update used for noisy labels: every behavior is folded in.
    pub fn observe_unconditional(
        &mut self,
        id: usize,
        logits: &[f64],
        true_class: usize,
        epoch: usize,
    ) -> Result<bool> {
        if !self.config.unconditional {
            return Err(FerError::Mode(
                "unconditional observation requires noisy mode or the no-gate ablation".into(),
            ));
        }
        self.check_id(id)?;
        self.check_logit_width(logits, true_class)?;
        self.fold_logits(id, logits, true_class, epoch)?;
        let correct = argmax(logits) == true_class;
        if correct {
            self.ever_correct[id] = true;
            self.correct_count[id] += 1;
        }
        Ok(correct)
    }

    fn check_logit_width(&self, logits: &[f64], true_class: usize) -> Result<()> {
        if logits.len() != self.classes {
            return Err(FerError::Shape(format!(
                "expected {} logits, got {}",
                self.classes,
                logits.len()
            )));
        }
        check_class(true_class, self.classes)
    }

    fn fold_logits(&mut self, id: usize, logits: &[f64], true_class: usize, epoch: usize) -> Result<()> {
        let behavior = softmax_temp(logits, self.config.tau)?;
        let confidence = softmax_temp(logits, 1.0)?[true_class];
        self.fold(id, &behavior, confidence, epoch);
        Ok(())
    }

    /// Folds `behavior` with confidence `confidence` into entry `id`.
    pub(crate) fn fold(&mut self, id: usize, behavior: &[f64], confidence: f64, epoch: usize) {
        let k = self.classes;
        let first = !self.has_target[id];
        let row = &mut self.b_hat[id * k..(id + 1) * k];
        if first || !self.config.average {
            row.copy_from_slice(behavior);
        } else {
            let keep = (-self.config.mu * confidence).exp();
            for (h, &b) in row.iter_mut().zip(behavior) {
                *h = keep * *h + (1.0 - keep) * b;
            }
        }
        self.has_target[id] = true;
        self.last_epoch[id] = Some(epoch);
    }

    /// The detached averaged behavior, or `None` if the sample has none yet.
    pub fn target_for(&self, id: usize) -> Result<Option<ProbVector>> {
        self.check_id(id)?;
        Ok(self.has_target[id].then(|| ProbVector::from_raw_unchecked(self.row(id).to_vec())))
    }

    pub fn is_ever_correct(&self, id: usize) -> Result<bool> {
        self.check_id(id)?;
        Ok(self.ever_correct[id])
    }

    pub fn ever_correct_count(&self) -> usize {
        self.ever_correct.iter().filter(|f| **f).count()
    }

    pub fn target_count(&self) -> usize {
        self.has_target.iter().filter(|f| **f).count()
    }

    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u64::<LittleEndian>(self.classes as u64)?;
        w.write_f64::<LittleEndian>(self.config.tau)?;
        w.write_f64::<LittleEndian>(self.config.mu)?;
        w.write_u8(self.config.average as u8 | (self.config.unconditional as u8) << 1)?;
        for id in 0..self.len() {
            w.write_u8(self.ever_correct[id] as u8 | (self.has_target[id] as u8) << 1)?;
            w.write_u64::<LittleEndian>(self.correct_count[id])?;
            w.write_i64::<LittleEndian>(self.last_epoch[id].map_or(-1, |e| e as i64))?;
            for &p in self.row(id) {
                w.write_f64::<LittleEndian>(p)?;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(45 + self.len() * (17 + 8 * self.classes));
        self.write_snapshot(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Parses a snapshot; nothing is returned unless every entry is valid.
    pub fn restore<R: Read>(r: &mut R) -> Result<Self> {
        let header = |what: &str, e: std::io::Error| FerError::parse("snapshot header", format!("{what}: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| header("magic", e))?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(FerError::parse("snapshot header", "not a behavior-memory snapshot"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| header("version", e))?;
        if version != SNAPSHOT_VERSION {
            return Err(FerError::parse(
                "snapshot header",
                format!("unsupported version {version}"),
            ));
        }
        let n = r.read_u64::<LittleEndian>().map_err(|e| header("n", e))? as usize;
        let classes = r.read_u64::<LittleEndian>().map_err(|e| header("K", e))? as usize;
        let tau = r.read_f64::<LittleEndian>().map_err(|e| header("tau", e))?;
        let mu = r.read_f64::<LittleEndian>().map_err(|e| header("mu", e))?;
        let mode = r.read_u8().map_err(|e| header("mode", e))?;
        let config = MemoryConfig {
            tau,
            mu,
            average: mode & 1 != 0,
            unconditional: mode & 2 != 0,
        };
        if classes > 1 << 20 || n > 1 << 32 {
            return Err(FerError::parse(
                "snapshot header",
                format!("implausible size n={n} K={classes}"),
            ));
        }
        let mut mem =
            BehaviorMemory::new(0, classes, config).map_err(|e| FerError::parse("snapshot header", e.to_string()))?;
        for id in 0..n {
            let at = |e: std::io::Error| FerError::parse(format!("snapshot entry {id}"), e.to_string());
            let flags = r.read_u8().map_err(at)?;
            let count = r.read_u64::<LittleEndian>().map_err(at)?;
            let epoch = r.read_i64::<LittleEndian>().map_err(at)?;
            let mut row = vec![0.0; classes];
            r.read_f64_into::<LittleEndian>(&mut row).map_err(at)?;
            let ever_correct = flags & 1 != 0;
            let has_target = flags & 2 != 0;
            if ever_correct != (count >= 1) {
                return Err(FerError::parse(
                    format!("snapshot entry {id}"),
                    "ever-correct flag disagrees with correct count",
                ));
            }
            if has_target {
                ProbVector::new(row.clone())
                    .map_err(|e| FerError::parse(format!("snapshot entry {id}"), e.to_string()))?;
            }
            mem.b_hat.extend_from_slice(&row);
            mem.has_target.push(has_target);
            mem.ever_correct.push(ever_correct);
            mem.correct_count.push(count);
            mem.last_epoch.push((epoch >= 0).then_some(epoch as usize));
        }
        Ok(mem)
    }
}
