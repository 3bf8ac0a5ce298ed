//! Per-epoch correctness history on the evaluation split and the flip metrics
//! derived from it.
//!
//! A wrongly flipped sample (WFS) at epoch `e` is misclassified at `e` but was
//! classified correctly at some epoch before `e`. Then
//! `FE = #WFS / n_eval` and `RFE = #WFS / #misclassified` (0 when nothing is
//! misclassified).
//!
//! # History file
//!
//! Plain text, one epoch per line after a two-line header:
//!
//! ```text
//! # fer prediction history v1
//! n_eval 10
//! 1101100111
//! 0101110111
//! ```
//!
//! Character `i` of an epoch line is `1` when sample `i` was classified correctly.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FerError, Result};

const HISTORY_HEADER: &str = "# fer prediction history v1";

/// Bit-packed correctness matrix, one column per recorded epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionHistory {
    n_eval: usize,
    columns: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub epoch: usize,
    pub n_eval: usize,
    pub n_misclassified: usize,
    pub n_wfs: usize,
    pub fe: f64,
    pub rfe: f64,
    pub accuracy: f64,
}

fn words(n: usize) -> usize {
    n.div_ceil(64)
}

fn bit(col: &[u64], i: usize) -> bool {
    col[i / 64] >> (i % 64) & 1 == 1
}

impl PredictionHistory {
    pub fn new(n_eval: usize) -> Self {
        PredictionHistory {
            n_eval,
            columns: Vec::new(),
        }
    }

    pub fn n_eval(&self) -> usize {
        self.n_eval
    }

    pub fn epoch_count(&self) -> usize {
        self.columns.len()
    }

    pub fn is_correct(&self, sample: usize, epoch: usize) -> bool {
        bit(&self.columns[epoch], sample)
    }

    /// Appends one epoch column. The history is untouched on error.
    pub fn record_epoch(&mut self, predictions: &[usize], truths: &[usize]) -> Result<()> {
        if predictions.len() != self.n_eval || truths.len() != self.n_eval {
            return Err(FerError::Shape(format!(
                "history tracks {} samples, got {} predictions and {} labels",
                self.n_eval,
                predictions.len(),
                truths.len()
            )));
        }
        let correct: Vec<bool> = predictions.iter().zip(truths).map(|(p, t)| p == t).collect();
        self.push_column(&correct);
        Ok(())
    }

    fn push_column(&mut self, correct: &[bool]) {
        let mut col = vec![0u64; words(self.n_eval)];
        for (i, _) in correct.iter().enumerate().filter(|(_, c)| **c) {
            col[i / 64] |= 1 << (i % 64);
        }
        self.columns.push(col);
    }

    pub fn flip_report(&self, at_epoch: usize) -> Result<FlipReport> {
        if at_epoch >= self.epoch_count() {
            return Err(FerError::Index {
                index: at_epoch,
                len: self.epoch_count(),
            });
        }
        let mut seen = vec![0u64; words(self.n_eval)];
        for col in &self.columns[..at_epoch] {
            for (s, c) in seen.iter_mut().zip(col) {
                *s |= c;
            }
        }
        let current = &self.columns[at_epoch];
        let n_correct: usize = current.iter().map(|w| w.count_ones() as usize).sum();
        let n_wfs: usize = seen
            .iter()
            .zip(current)
            .map(|(s, c)| (s & !c).count_ones() as usize)
            .sum();
        let n_misclassified = self.n_eval - n_correct;
        let n = self.n_eval.max(1) as f64;
        Ok(FlipReport {
            epoch: at_epoch,
            n_eval: self.n_eval,
            n_misclassified,
            n_wfs,
            fe: n_wfs as f64 / n,
            rfe: if n_misclassified == 0 {
                0.0
            } else {
                n_wfs as f64 / n_misclassified as f64
            },
            accuracy: n_correct as f64 / n,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\nn_eval {}\n", self.n_eval);
        for col in &self.columns {
            for i in 0..self.n_eval {
                out.push(if bit(col, i) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HISTORY_HEADER => {}
            _ => return Err(FerError::parse("line 1", "missing history header")),
        }
        let n_eval = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("n_eval ")
                .and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| FerError::parse("line 2", "expected `n_eval <count>`"))?,
            None => return Err(FerError::parse("line 2", "missing n_eval")),
        };
        let mut hist = PredictionHistory::new(n_eval);
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let correct = line
                .chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    other => Err(FerError::parse(
                        format!("line {}", i + 1),
                        format!("unexpected character {other:?}"),
                    )),
                })
                .collect::<Result<Vec<_>>>()?;
            if correct.len() != n_eval {
                return Err(FerError::parse(
                    format!("line {}", i + 1),
                    format!("expected {n_eval} entries, found {}", correct.len()),
                ));
            }
            hist.push_column(&correct);
        }
        Ok(hist)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| FerError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FerError::io(path, e))?;
        Self::from_text(&text)
    }
}

impl FlipReport {
    /// One-line human summary, e.g. `epoch 2: acc=0.600 FE=0.300 RFE=0.750 (WFS 3 / MTS 4 / n 10)`.
    pub fn summary_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "epoch {}: acc={:.3} FE={:.3} RFE={:.3} (WFS {} / MTS {} / n {})",
            self.epoch, self.accuracy, self.fe, self.rfe, self.n_wfs, self.n_misclassified, self.n_eval
        );
        s
    }
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(FerError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn from_rows(rows: &[&str]) -> PredictionHistory {
        let n = rows[0].len();
        let mut h = PredictionHistory::new(n);
        for r in rows {
            let truths = vec![1usize; n];
            let preds: Vec<usize> = r.chars().map(|c| if c == '1' { 1 } else { 0 }).collect();
            h.record_epoch(&preds, &truths).unwrap();
        }
        h
    }

    /// 10 samples; at the last epoch 4 are wrong and 3 of those were right before.
    pub(crate) fn ten_sample_history() -> PredictionHistory {
        from_rows(&["1100000111", "1110010111", "0110111100"])
    }

    #[test]
    fn ten_sample_example() {
        let r = ten_sample_history().flip_report(2).unwrap();
        assert_eq!((r.n_misclassified, r.n_wfs), (4, 3));
        assert!((r.fe - 0.3).abs() < 1e-15);
        assert!((r.rfe - 0.75).abs() < 1e-15);
        assert!((r.accuracy - 0.6).abs() < 1e-15);
    }

    #[test]
    fn never_correct_means_no_flips() {
        let r = from_rows(&["0000", "0000", "0000"]).flip_report(2).unwrap();
        assert_eq!((r.n_wfs, r.fe, r.rfe), (0, 0.0, 0.0));
        assert_eq!(r.n_misclassified, 4);
    }

    #[test]
    fn all_correct_last_epoch() {
        let r = from_rows(&["1010", "0101", "1111"]).flip_report(2).unwrap();
        assert_eq!((r.n_misclassified, r.fe, r.rfe), (0, 0.0, 0.0));
    }

    #[test]
    fn record_epoch_behaviour() {
        let mut h = PredictionHistory::new(3);
        h.record_epoch(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert!((0..3).all(|i| h.is_correct(i, 0)));
        h.record_epoch(&[0, 0, 0], &[0, 1, 2]).unwrap();
        assert_eq!(h.epoch_count(), 2);
        let before = h.clone();
        assert!(matches!(h.record_epoch(&[0, 1], &[0, 1]), Err(FerError::Shape(_))));
        assert_eq!(h, before);
        assert!(matches!(h.flip_report(2), Err(FerError::Index { index: 2, len: 2 })));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        let p: Vec<usize> = (0..10).map(|i| usize::from(i == 0)).collect();
        assert!((accuracy(&p, &[0; 10]).unwrap() - 0.9).abs() < 1e-15);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn text_roundtrip_and_errors() {
        let h = ten_sample_history();
        assert_eq!(PredictionHistory::from_text(&h.to_text()).unwrap(), h);
        assert!(PredictionHistory::from_text("nonsense").is_err());
        let bad = format!("{HISTORY_HEADER}\nn_eval 3\n101\n10\n");
        match PredictionHistory::from_text(&bad) {
            Err(FerError::Parse { location, .. }) => assert_eq!(location, "line 4"),
            other => panic!("{other:?}"),
        }
    }

    fn brute_force_wfs(bits: &[Vec<bool>], at: usize) -> (usize, usize) {
        let n = bits[0].len();
        let mut wfs = 0;
        let mut wrong = 0;
        for i in 0..n {
            if !bits[at][i] {
                wrong += 1;
                let mut earlier = false;
                for row in bits.iter().take(at) {
                    if row[i] {
                        earlier = true;
                    }
                }
                if earlier {
                    wfs += 1;
                }
            }
        }
        (wfs, wrong)
    }

    fn histories() -> impl Strategy<Value = Vec<Vec<bool>>> {
        (1usize..=200, 1usize..=51)
            .prop_flat_map(|(n, epochs)| prop::collection::vec(prop::collection::vec(any::<bool>(), n), epochs))
    }

    fn build(bits: &[Vec<bool>]) -> PredictionHistory {
        let mut h = PredictionHistory::new(bits[0].len());
        for row in bits {
            let preds: Vec<usize> = row.iter().map(|&c| usize::from(c)).collect();
            h.record_epoch(&preds, &vec![1; row.len()]).unwrap();
        }
        h
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matches_brute_force(bits in histories(), pick in any::<prop::sample::Index>()) {
            let h = build(&bits);
            let at = pick.index(bits.len());
            let r = h.flip_report(at).unwrap();
            let (wfs, wrong) = brute_force_wfs(&bits, at);
            prop_assert_eq!(r.n_wfs, wfs);
            prop_assert_eq!(r.n_misclassified, wrong);
            prop_assert!(r.n_wfs <= r.n_misclassified && r.n_misclassified <= r.n_eval);
            prop_assert!(r.fe <= 1.0 - r.accuracy + 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.rfe));
            if r.n_misclassified > 0 {
                prop_assert!((r.rfe * r.n_misclassified as f64 - r.n_wfs as f64).abs() < 1e-9);
            }
        }

        #[test]
        fn final_all_correct_epoch_clears_flips(bits in histories()) {
            let mut h = build(&bits);
            let n = h.n_eval();
            h.record_epoch(&vec![1; n], &vec![1; n]).unwrap();
            let r = h.flip_report(h.epoch_count() - 1).unwrap();
            prop_assert_eq!(r.fe, 0.0);
            prop_assert_eq!(r.rfe, 0.0);
        }
    }
}
