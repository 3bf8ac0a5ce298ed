//! Tabular datasets: delimited-file ingestion, stratified splits,
//! standardization, label-noise injection and synthetic Gaussian blobs.
//!
//! # Split rounding
//!
//! Splits are stratified. For a class with `n_c` samples the ideal part sizes
//! are `n_c * f_i`; each part first gets the floor, then the leftover samples
//! go one at a time to the parts with the largest fractional remainder (ties
//! to the earlier part: train, then val, then test). A part with a non-zero
//! fraction that would end up empty takes one sample from the largest part.
//! 50 samples at 60/20/20 thus split 30/10/10.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FerError, Result};

/// Index lists of the three splits.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub splits: Splits,
    /// Set for training rows whose label was replaced by noise.
    pub noise_mask: Vec<bool>,
    /// Labels before any noise injection.
    pub clean_labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    Comma,
    Whitespace,
}

impl Delimiter {
    fn fields<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Comma => line.split(',').map(str::trim).collect(),
            Delimiter::Whitespace => line.split_whitespace().collect(),
        }
    }
}

/// Which columns hold features and which holds the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub delimiter: Delimiter,
    /// Label column; negative values count from the end (`-1` is the last column).
    pub label_column: isize,
    /// Feature columns; all non-label columns when `None`.
    pub feature_columns: Option<Vec<usize>>,
    /// Skip the first line.
    pub header: bool,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            delimiter: Delimiter::Comma,
            label_column: -1,
            feature_columns: None,
            header: false,
        }
    }
}

/// Label-noise settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub rate: f64,
    pub seed: u64,
    /// Draw the replacement from the other `K - 1` classes only.
    #[serde(default)]
    pub exclude_true: bool,
}

/// Per-feature statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Sidecar written next to run outputs so a run's data can be reconstructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub n: usize,
    pub d: usize,
    pub class_names: Vec<String>,
    pub splits: Splits,
    pub noisy_indices: Vec<usize>,
    pub standardizer: Option<Standardizer>,
}

pub const STD_FLOOR: f64 = 1e-8;

struct LabelMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl LabelMap {
    fn new(names: &[String], frozen: bool) -> Self {
        LabelMap {
            names: names.to_vec(),
            index: names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
            frozen,
        }
    }

    fn get(&mut self, name: &str, line: usize) -> Result<usize> {
        if let Some(&i) = self.index.get(name) {
            return Ok(i);
        }
        if self.frozen {
            return Err(FerError::parse(
                format!("line {line}"),
                format!("unseen label {name:?}"),
            ));
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        Ok(self.names.len() - 1)
    }
}

fn resolve_label_column(col: isize, width: usize, line: usize) -> Result<usize> {
    let idx = if col < 0 { width as isize + col } else { col };
    if idx < 0 || idx as usize >= width {
        return Err(FerError::parse(
            format!("line {line}"),
            format!("label column {col} out of range for {width} fields"),
        ));
    }
    Ok(idx as usize)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| FerError::io(path, e))
}

fn parse_real(field: &str, line: usize, col: usize) -> Result<f64> {
    field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
        FerError::parse(
            format!("line {line}"),
            format!("column {col}: {field:?} is not a finite number"),
        )
    })
}

fn parse_delimited(text: &str, schema: &Schema, labels: &mut LabelMap) -> Result<(Vec<f64>, usize, Vec<usize>)> {
    let mut values = Vec::new();
    let mut ys = Vec::new();
    let mut width: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if (schema.header && i == 0) || raw.trim().is_empty() {
            continue;
        }
        let fields = schema.delimiter.fields(raw.trim());
        let label_col = resolve_label_column(schema.label_column, fields.len(), line_no)?;
        let cols: Vec<usize> = match &schema.feature_columns {
            Some(cols) => cols.clone(),
            None => (0..fields.len()).filter(|c| *c != label_col).collect(),
        };
        match width {
            None => width = Some(cols.len()),
            Some(w) if w != cols.len() => {
                return Err(FerError::parse(
                    format!("line {line_no}"),
                    format!("expected {w} features, found {}", cols.len()),
                ))
            }
            _ => {}
        }
        for c in cols {
            let field = fields
                .get(c)
                .ok_or_else(|| FerError::parse(format!("line {line_no}"), format!("missing column {c}")))?;
            values.push(parse_real(field, line_no, c)?);
        }
        ys.push(labels.get(fields[label_col], line_no)?);
    }
    Ok((values, width.unwrap_or(0), ys))
}

impl Dataset {
    /// Builds a dataset with every row in the training split.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(FerError::Shape(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= class_names.len()) {
            return Err(FerError::Index {
                index: *bad,
                len: class_names.len(),
            });
        }
        let n = labels.len();
        Ok(Dataset {
            features,
            clean_labels: labels.clone(),
            labels,
            class_names,
            splits: Splits {
                train: (0..n).collect(),
                ..Splits::default()
            },
            noise_mask: vec![false; n],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), indices)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Parses a delimited text file. String labels are indexed in order of
    /// first appearance.
    pub fn load_delimited(path: &Path, schema: &Schema) -> Result<Self> {
        let text = read_text(path)?;
        let mut labels = LabelMap::new(&[], false);
        let (values, d, ys) = parse_delimited(&text, schema, &mut labels)?;
        let features = Array2::from_shape_vec((ys.len(), d), values).expect("row widths checked");
        Dataset::new(features, ys, labels.names)
    }

    /// Like [`Dataset::load_delimited`] but with a fixed label vocabulary;
    /// an unknown label is an error.
    pub fn load_delimited_with_labels(path: &Path, schema: &Schema, class_names: &[String]) -> Result<Self> {
        let text = read_text(path)?;
        let mut labels = LabelMap::new(class_names, true);
        let (values, d, ys) = parse_delimited(&text, schema, &mut labels)?;
        let features = Array2::from_shape_vec((ys.len(), d), values).expect("row widths checked");
        Dataset::new(features, ys, class_names.to_vec())
    }

    /// Features and labels in two files (one label per line), as in the
    /// published Arcene distribution.
    pub fn load_feature_label_files(
        features: &Path,
        labels: &Path,
        delimiter: Delimiter,
        class_names: Option<&[String]>,
    ) -> Result<Self> {
        let ftext = read_text(features)?;
        let ltext = read_text(labels)?;
        let mut map = match class_names {
            Some(names) => LabelMap::new(names, true),
            None => LabelMap::new(&[], false),
        };
        let mut ys = Vec::new();
        for (i, l) in ltext.lines().enumerate() {
            let l = l.trim();
            if !l.is_empty() {
                ys.push(map.get(l, i + 1).map_err(|e| relabel(e, labels))?);
            }
        }
        let mut values = Vec::new();
        let mut rows = 0;
        let mut width = None;
        for (i, line) in ftext.lines().enumerate() {
            let fields = delimiter.fields(line.trim());
            if line.trim().is_empty() {
                continue;
            }
            match width {
                None => width = Some(fields.len()),
                Some(w) if w != fields.len() => {
                    return Err(FerError::parse(
                        format!("{}:{}", features.display(), i + 1),
                        format!("expected {w} features, found {}", fields.len()),
                    ))
                }
                _ => {}
            }
            for (c, f) in fields.iter().enumerate() {
                values.push(parse_real(f, i + 1, c).map_err(|e| relabel(e, features))?);
            }
            rows += 1;
        }
        if rows != ys.len() {
            return Err(FerError::Shape(format!(
                "{} has {rows} rows but {} has {} labels",
                features.display(),
                labels.display(),
                ys.len()
            )));
        }
        let features = Array2::from_shape_vec((rows, width.unwrap_or(0)), values).expect("row widths checked");
        Dataset::new(features, ys, map.names)
    }

    /// Arcene: the published training set becomes `train`, the published
    /// validation set becomes `test`.
    pub fn load_arcene(dir: &Path) -> Result<Self> {
        let p = |name: &str| -> PathBuf { dir.join(name) };
        let train = Dataset::load_feature_label_files(
            &p("arcene_train.data"),
            &p("arcene_train.labels"),
            Delimiter::Whitespace,
            None,
        )?;
        let test = Dataset::load_feature_label_files(
            &p("arcene_valid.data"),
            &p("arcene_valid.labels"),
            Delimiter::Whitespace,
            Some(&train.class_names),
        )?;
        Dataset::concat_as_train_test(train, test)
    }

    /// Stacks two datasets with the same vocabulary; rows of `a` form the
    /// training split and rows of `b` the test split.
    pub fn concat_as_train_test(a: Dataset, b: Dataset) -> Result<Self> {
        if a.dim() != b.dim() || a.class_names != b.class_names {
            return Err(FerError::Shape("datasets disagree on width or labels".into()));
        }
        let (na, nb) = (a.len(), b.len());
        let features = ndarray::concatenate(Axis(0), &[a.features.view(), b.features.view()]).expect("equal widths");
        let mut labels = a.labels;
        labels.extend(b.labels);
        let mut ds = Dataset::new(features, labels, a.class_names)?;
        ds.splits = Splits {
            train: (0..na).collect(),
            val: Vec::new(),
            test: (na..na + nb).collect(),
        };
        Ok(ds)
    }

    /// Assigns explicit split indices, which must be disjoint and cover every row.
    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &i in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            if i >= self.len() {
                return Err(FerError::Index {
                    index: i,
                    len: self.len(),
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(FerError::Config(format!("row {i} appears in more than one split")));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(FerError::Config(format!("row {missing} is in no split")));
        }
        self.splits = splits;
        Ok(self)
    }

    /// Stratified shuffled split into train/val/test fractions.
    pub fn split(mut self, fractions: [f64; 3], seed: u64) -> Result<Self> {
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(FerError::Config(format!(
                "split fractions {fractions:?} must be in [0,1] and sum to 1"
            )));
        }
        let parts_needed = fractions.iter().filter(|f| **f > 0.0).count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut splits = Splits::default();
        for class in 0..self.class_count() {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < parts_needed {
                return Err(FerError::Stratification(format!(
                    "class {:?} has {} samples but {parts_needed} non-empty splits were requested",
                    self.class_names[class],
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            let counts = stratum_counts(members.len(), &fractions);
            let (train, rest) = members.split_at(counts[0]);
            let (val, test) = rest.split_at(counts[1]);
            splits.train.extend_from_slice(train);
            splits.val.extend_from_slice(val);
            splits.test.extend_from_slice(test);
        }
        for part in [&mut splits.train, &mut splits.val, &mut splits.test] {
            part.sort_unstable();
        }
        self.splits = splits;
        Ok(self)
    }

    /// Standardizes every row with training-split mean and standard deviation.
    pub fn standardize(mut self) -> Result<(Self, Standardizer)> {
        if self.splits.train.is_empty() {
            return Err(FerError::Config(
                "cannot standardize with an empty training split".into(),
            ));
        }
        let train = self.rows(&self.splits.train);
        let mean = train.mean_axis(Axis(0)).expect("non-empty");
        let std = train.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
        for mut row in self.features.rows_mut() {
            row -= &mean;
            row /= &std;
        }
        let stats = Standardizer {
            mean: mean.to_vec(),
            std: std.to_vec(),
        };
        Ok((self, stats))
    }

    /// Replaces `floor(rate * n_train)` training labels with uniform draws.
    pub fn inject_noise(mut self, spec: &NoiseSpec) -> Result<Self> {
        if !(0.0..=1.0).contains(&spec.rate) {
            return Err(FerError::Config(format!("noise rate {} outside [0, 1]", spec.rate)));
        }
        let k = self.class_count();
        if spec.exclude_true && k < 2 {
            return Err(FerError::Config("exclude-true noise needs at least 2 classes".into()));
        }
        let n_train = self.splits.train.len();
        let amount = (spec.rate * n_train as f64).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut chosen = index::sample(&mut rng, n_train, amount).into_vec();
        chosen.sort_unstable();
        for pos in chosen {
            let row = self.splits.train[pos];
            let label = if spec.exclude_true {
                let draw = rng.random_range(0..k - 1);
                if draw >= self.clean_labels[row] {
                    draw + 1
                } else {
                    draw
                }
            } else {
                rng.random_range(0..k)
            };
            self.labels[row] = label;
            self.noise_mask[row] = true;
        }
        Ok(self)
    }

    pub fn manifest(&self, source: &str, standardizer: Option<&Standardizer>) -> DatasetManifest {
        DatasetManifest {
            source: source.to_string(),
            n: self.len(),
            d: self.dim(),
            class_names: self.class_names.clone(),
            splits: self.splits.clone(),
            noisy_indices: (0..self.len()).filter(|&i| self.noise_mask[i]).collect(),
            standardizer: standardizer.cloned(),
        }
    }

    /// Features followed by the label name, one row per line. Floats use the
    /// shortest representation that parses back to the same value.
    pub fn to_delimited(&self, delimiter: Delimiter) -> String {
        let sep = match delimiter {
            Delimiter::Comma => ",",
            Delimiter::Whitespace => " ",
        };
        let mut out = String::new();
        for (row, &label) in self.features.outer_iter().zip(&self.labels) {
            for x in row {
                out.push_str(&x.to_string());
                out.push_str(sep);
            }
            out.push_str(&self.class_names[label]);
            out.push('\n');
        }
        out
    }

    pub fn write_delimited(&self, path: &Path, delimiter: Delimiter) -> Result<()> {
        std::fs::write(path, self.to_delimited(delimiter)).map_err(|e| FerError::io(path, e))
    }
}

fn relabel(e: FerError, path: &Path) -> FerError {
    match e {
        FerError::Parse { location, message } => FerError::Parse {
            location: format!("{}:{}", path.display(), location.trim_start_matches("line ")),
            message,
        },
        other => other,
    }
}

fn stratum_counts(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, x) in counts.iter_mut().zip(&ideal) {
        *c = x.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    // stable sort keeps earlier parts first on equal remainders
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap()
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

/// Isotropic unit-variance Gaussian clusters.
///
/// Class means lie on a circle in the first two coordinates, adjacent means
/// `separation` apart (on a line when `d == 1`). Labels are named `c0..`.
pub fn make_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dim == 0 || !(separation >= 0.0) {
        return Err(FerError::Config(format!(
            "make_blobs needs positive sizes and non-negative separation (K={classes}, n={per_class}, d={dim}, sep={separation})"
        )));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut mu = vec![0.0; dim];
            if dim == 1 || classes == 1 {
                mu[0] = c as f64 * separation;
            } else {
                let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
                let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                mu[0] = radius * angle.cos();
                mu[1] = radius * angle.sin();
            }
            mu
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mu) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for m in mu {
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(m + z);
            }
            labels.push(c);
        }
    }
    let features = Array2::from_shape_vec((n, dim), values).expect("sized above");
    Dataset::new(features, labels, (0..classes).map(|c| format!("c{c}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delimited_round_trip() {
        let ds = make_blobs(3, 4, 2, 1.5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.csv");
        ds.write_delimited(&path, Delimiter::Comma).unwrap();
        let back = Dataset::load_delimited(&path, &Schema::default()).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.class_names, ds.class_names);
    }
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn iris_path() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/iris.data")
    }

    #[test]
    fn loads_iris() {
        let ds = Dataset::load_delimited(&iris_path(), &Schema::default()).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.class_count()), (150, 4, 3));
        assert_eq!(ds.class_names, ["Iris-setosa", "Iris-versicolor", "Iris-virginica"]);
    }

    #[test]
    fn single_row_and_bad_row() {
        let f = write_tmp("1.0,2.0,a\n");
        let ds = Dataset::load_delimited(f.path(), &Schema::default()).unwrap();
        assert_eq!(ds.len(), 1);

        let f = write_tmp("1.0,2.0,a\n1.0,x,b\n");
        match Dataset::load_delimited(f.path(), &Schema::default()) {
            Err(FerError::Parse { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("{other:?}"),
        }
        let f = write_tmp("1.0,2.0,a\n1.0,b\n");
        assert!(Dataset::load_delimited(f.path(), &Schema::default()).is_err());
    }

    #[test]
    fn whitespace_header_and_columns() {
        let f = write_tmp("label f1 f2 f3\nx  1 2 3\ny 4 5   6\n");
        let schema = Schema {
            delimiter: Delimiter::Whitespace,
            label_column: 0,
            feature_columns: Some(vec![1, 3]),
            header: true,
        };
        let ds = Dataset::load_delimited(f.path(), &schema).unwrap();
        assert_eq!(ds.features, ndarray::array![[1.0, 3.0], [4.0, 6.0]]);
        assert_eq!(ds.labels, vec![0, 1]);
    }

    #[test]
    fn unseen_label_with_fixed_vocabulary() {
        let f = write_tmp("1,a\n2,c\n");
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(
            Dataset::load_delimited_with_labels(f.path(), &Schema::default(), &names),
            Err(FerError::Parse { .. })
        ));
    }

    #[test]
    fn feature_label_file_pair() {
        let feats = write_tmp("1 2 3 \n4 5 6 \n7 8 9 \n");
        let labels = write_tmp("1\n-1\n1\n");
        let ds = Dataset::load_feature_label_files(feats.path(), labels.path(), Delimiter::Whitespace, None).unwrap();
        assert_eq!((ds.len(), ds.dim()), (3, 3));
        assert_eq!(ds.labels, vec![0, 1, 0]);

        let short = write_tmp("1\n-1\n");
        assert!(matches!(
            Dataset::load_feature_label_files(feats.path(), short.path(), Delimiter::Whitespace, None),
            Err(FerError::Shape(_))
        ));
    }

    #[test]
    fn iris_split_sizes_and_determinism() {
        let ds = Dataset::load_delimited(&iris_path(), &Schema::default()).unwrap();
        let a = ds.clone().split([0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(
            (a.splits.train.len(), a.splits.val.len(), a.splits.test.len()),
            (90, 30, 30)
        );
        for c in 0..3 {
            assert_eq!(a.labels_of(&a.splits.test).iter().filter(|&&y| y == c).count(), 10);
        }
        let b = ds.clone().split([0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(a.splits, b.splits);
        let c = ds.clone().split([0.6, 0.2, 0.2], 4).unwrap();
        assert_ne!(a.splits, c.splits);
        let all = ds.split([1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(all.splits.train.len(), 150);
        assert!(all.splits.val.is_empty() && all.splits.test.is_empty());
    }

    #[test]
    fn split_rejects_tiny_classes_and_bad_fractions() {
        let ds = Dataset::new(
            ndarray::array![[0.0], [1.0], [2.0]],
            vec![0, 0, 1],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(matches!(
            ds.clone().split([0.5, 0.25, 0.25], 0),
            Err(FerError::Stratification(_))
        ));
        assert!(matches!(ds.split([0.5, 0.6, 0.0], 0), Err(FerError::Config(_))));
    }

    #[test]
    fn stratum_rounding() {
        assert_eq!(stratum_counts(50, &[0.6, 0.2, 0.2]), [30, 10, 10]);
        assert_eq!(stratum_counts(7, &[0.6, 0.2, 0.2]), [4, 2, 1]);
        assert_eq!(stratum_counts(3, &[0.9, 0.05, 0.05]), [1, 1, 1]);
        assert_eq!(stratum_counts(10, &[1.0, 0.0, 0.0]), [10, 0, 0]);
    }

    #[test]
    fn standardize_uses_train_statistics() {
        // train rows are 0..4, test row is far away
        let x = ndarray::array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [4.0, 5.0], [100.0, 7.0]];
        let ds = Dataset::new(x, vec![0, 1, 0, 1, 0], vec!["a".into(), "b".into()])
            .unwrap()
            .with_splits(Splits {
                train: vec![0, 1, 2, 3],
                val: vec![],
                test: vec![4],
            })
            .unwrap();
        let (z, stats) = ds.standardize().unwrap();
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        let train = z.rows(&z.splits.train);
        for m in train.mean_axis(Axis(0)).unwrap() {
            assert!(m.abs() < 1e-9);
        }
        // constant feature maps to zero on train rows
        assert!(train.column(1).iter().all(|v| *v == 0.0));
        let sd = (1.25f64).sqrt();
        assert!((z.features[[4, 0]] - (100.0 - 2.5) / sd).abs() < 1e-9);
        assert_ne!(z.features[[4, 0]], 0.0);
    }

    #[test]
    fn standardize_is_idempotent() {
        let ds = make_blobs(3, 20, 4, 3.0, 1).unwrap().split([0.6, 0.2, 0.2], 0).unwrap();
        let (once, _) = ds.standardize().unwrap();
        let (twice, _) = once.clone().standardize().unwrap();
        for (a, b) in once.features.iter().zip(twice.features.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_rate_zero_is_identity() {
        let ds = make_blobs(3, 20, 2, 2.0, 1).unwrap().split([0.6, 0.2, 0.2], 0).unwrap();
        let noisy = ds
            .clone()
            .inject_noise(&NoiseSpec {
                rate: 0.0,
                seed: 5,
                exclude_true: false,
            })
            .unwrap();
        assert_eq!(noisy, ds);
    }

    /// Independent reimplementation of the noise protocol, used as the oracle.
    fn reference_noise(labels: &[usize], train: &[usize], k: usize, rate: f64, seed: u64) -> Vec<usize> {
        let mut out = labels.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amount = (rate * train.len() as f64).floor() as usize;
        let mut picks = index::sample(&mut rng, train.len(), amount).into_vec();
        picks.sort_unstable();
        for p in picks {
            out[train[p]] = rand::Rng::random_range(&mut rng, 0..k);
        }
        out
    }

    #[test]
    fn full_noise_matches_reference_and_chance_rate() {
        let k = 4;
        let ds = make_blobs(k, 500, 2, 2.0, 9)
            .unwrap()
            .split([0.8, 0.0, 0.2], 1)
            .unwrap();
        let noisy = ds
            .clone()
            .inject_noise(&NoiseSpec {
                rate: 1.0,
                seed: 11,
                exclude_true: false,
            })
            .unwrap();
        let oracle = reference_noise(&ds.labels, &ds.splits.train, k, 1.0, 11);
        assert_eq!(noisy.labels, oracle);
        assert_eq!(noisy.noise_mask.iter().filter(|m| **m).count(), ds.splits.train.len());
        let kept = ds
            .splits
            .train
            .iter()
            .filter(|&&i| noisy.labels[i] == ds.labels[i])
            .count();
        let frac = kept as f64 / ds.splits.train.len() as f64;
        assert!((frac - 1.0 / k as f64).abs() < 0.03, "kept fraction {frac}");
        for &i in &ds.splits.test {
            assert_eq!(noisy.labels[i], ds.labels[i]);
        }
    }

    #[test]
    fn exclude_true_always_changes_label() {
        let ds = make_blobs(3, 50, 2, 2.0, 9).unwrap();
        let noisy = ds
            .clone()
            .inject_noise(&NoiseSpec {
                rate: 1.0,
                seed: 2,
                exclude_true: true,
            })
            .unwrap();
        assert!(ds.labels.iter().zip(&noisy.labels).all(|(a, b)| a != b));
    }

    #[test]
    fn blobs_are_deterministic_and_sized() {
        let a = make_blobs(4, 100, 2, 2.0, 3).unwrap();
        assert_eq!(a, make_blobs(4, 100, 2, 2.0, 3).unwrap());
        assert_eq!((a.len(), a.dim(), a.class_count()), (400, 2, 4));
        assert_ne!(a.features, make_blobs(4, 100, 2, 2.0, 4).unwrap().features);
        assert!(make_blobs(0, 1, 1, 1.0, 0).is_err());
    }

    #[test]
    fn blob_centers_are_separated() {
        let ds = make_blobs(4, 4000, 2, 10.0, 3).unwrap();
        let mut means = Vec::new();
        for c in 0..4 {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
            means.push(ds.rows(&idx).mean_axis(Axis(0)).unwrap());
        }
        let d01 = (&means[0] - &means[1]).mapv(|v| v * v).sum().sqrt();
        assert!((d01 - 10.0).abs() < 0.2, "{d01}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn splits_are_disjoint_covering_and_deterministic(
            seed in any::<u64>(),
            per_class in 3usize..40,
            k in 2usize..5,
            f_train in 0.3f64..0.8,
            f_val_share in 0.0f64..1.0,
        ) {
            let f_val = (1.0 - f_train) * f_val_share;
            let fractions = [f_train, f_val, 1.0 - f_train - f_val];
            let ds = make_blobs(k, per_class, 2, 1.0, 0).unwrap();
            let a = ds.clone().split(fractions, seed).unwrap();
            let b = ds.clone().split(fractions, seed).unwrap();
            prop_assert_eq!(&a.splits, &b.splits);
            let mut all: Vec<usize> = a.splits.train.iter().chain(&a.splits.val).chain(&a.splits.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        }

        #[test]
        fn noise_mask_cardinality(rate in 0.0f64..=1.0, seed in any::<u64>()) {
            let ds = make_blobs(3, 30, 2, 1.0, 0).unwrap().split([0.6, 0.2, 0.2], 1).unwrap();
            let noisy = ds.clone().inject_noise(&NoiseSpec { rate, seed, exclude_true: false }).unwrap();
            let expected = (rate * ds.splits.train.len() as f64).floor() as usize;
            prop_assert_eq!(noisy.noise_mask.iter().filter(|m| **m).count(), expected);
            for &i in ds.splits.val.iter().chain(&ds.splits.test) {
                prop_assert!(!noisy.noise_mask[i]);
                prop_assert_eq!(noisy.labels[i], ds.labels[i]);
            }
        }
    }
}
