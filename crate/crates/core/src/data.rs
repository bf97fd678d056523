//! Datasets, probability vectors and the small amount of linear algebra the
//! selection stages share.
//!
//! A [`Sample`] carries an observed label plus an optional `true_label` that
//! exists purely for audits: training code never reads it, only noise
//! injection writes it and only audit / simulation paths consume it.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seeds;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("record at {path}:{line}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        path: String,
        line: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("sample {id}: {msg}")]
    BadSample { id: usize, msg: String },
    #[error("dataset: {0}")]
    BadDataset(String),
    #[error("probability vector: {0}")]
    BadProbability(String),
    #[error("split fractions {0:?} invalid: {1}")]
    BadFractions((f64, f64, f64), String),
}

/// One labeled example. `features` is the embedding the learners consume;
/// `text` is only used when rendering oracle prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub features: Vec<f64>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<usize>,
}

/// Raw JSONL record. Any `id` key in the file is ignored; ids are assigned
/// densely in file order on load.
#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(default)]
    text: Option<String>,
    features: Vec<f64>,
    label: usize,
    #[serde(default)]
    true_label: Option<usize>,
}

/// A discrete distribution over classes: entries in [0, 1], summing to one
/// within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(entries: Vec<f64>) -> Result<Self, DataError> {
        if entries.is_empty() {
            return Err(DataError::BadProbability("empty vector".into()));
        }
        let mut sum = 0.0;
        for (k, &p) in entries.iter().enumerate() {
            if !p.is_finite() {
                return Err(DataError::BadProbability(format!("entry {k} is {p}")));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::BadProbability(format!(
                    "entry {k} = {p} outside [0, 1]"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(DataError::BadProbability(format!(
                "entries sum to {sum}, not 1"
            )));
        }
        Ok(Self(entries))
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Self {
        assert!(class < num_classes, "class {class} >= {num_classes}");
        let mut v = vec![0.0; num_classes];
        v[class] = 1.0;
        Self(v)
    }

    /// Convex combination `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, other: &Self, lambda: f64) -> Result<Self, DataError> {
        if self.0.len() != other.0.len() {
            return Err(DataError::BadProbability(format!(
                "mixing vectors of lengths {} and {}",
                self.0.len(),
                other.0.len()
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(DataError::BadProbability(format!(
                "mix weight {lambda} outside [0, 1]"
            )));
        }
        let v = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        Self::new(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest entry; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = k;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }
}

impl fmt::Display for ProbabilityVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (k, p) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{p:.4}")?;
        }
        write!(f, "]")
    }
}

/// Optional metadata supplied alongside a data file. Absent pieces are
/// inferred: `num_classes` from the largest label seen, names as `class_<k>`.
#[derive(Debug, Clone, Default)]
pub struct DatasetMeta {
    pub num_classes: Option<usize>,
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown data format '{other}' (expected jsonl or csv)")),
        }
    }
}

/// A labeled dataset with a fixed class set and a consistent feature width.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    num_classes: usize,
    class_names: Vec<String>,
    feature_dim: usize,
    /// id -> position, for O(1) lookups from id sets.
    index: HashMap<usize, usize>,
}

impl LabeledDataset {
    /// Validates sample ids (unique), labels (below `num_classes`), feature
    /// widths (all equal) and feature values (finite).
    pub fn new(
        samples: Vec<Sample>,
        num_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self, DataError> {
        if num_classes < 2 {
            return Err(DataError::BadDataset(format!(
                "num_classes = {num_classes}, need at least 2"
            )));
        }
        let class_names = match class_names {
            Some(names) => {
                if names.len() != num_classes {
                    return Err(DataError::BadDataset(format!(
                        "{} class names for {num_classes} classes",
                        names.len()
                    )));
                }
                names
            }
            None => (0..num_classes).map(|k| format!("class_{k}")).collect(),
        };
        let feature_dim = samples.first().map_or(0, |s| s.features.len());
        let mut index = HashMap::with_capacity(samples.len());
        for (pos, s) in samples.iter().enumerate() {
            if index.insert(s.id, pos).is_some() {
                return Err(DataError::BadSample {
                    id: s.id,
                    msg: "duplicate id".into(),
                });
            }
            if s.features.len() != feature_dim {
                return Err(DataError::BadSample {
                    id: s.id,
                    msg: format!(
                        "feature width {} differs from {}",
                        s.features.len(),
                        feature_dim
                    ),
                });
            }
            if let Some(bad) = s.features.iter().find(|v| !v.is_finite()) {
                return Err(DataError::BadSample {
                    id: s.id,
                    msg: format!("non-finite feature {bad}"),
                });
            }
            if s.label >= num_classes {
                return Err(DataError::BadSample {
                    id: s.id,
                    msg: format!("label {} out of range for {num_classes} classes", s.label),
                });
            }
            if let Some(t) = s.true_label {
                if t >= num_classes {
                    return Err(DataError::BadSample {
                        id: s.id,
                        msg: format!("true_label {t} out of range for {num_classes} classes"),
                    });
                }
            }
        }
        Ok(Self {
            samples,
            num_classes,
            class_names,
            feature_dim,
            index,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn position_of(&self, id: usize) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Replaces the observed label of the sample at `position`.
    pub fn set_label(&mut self, position: usize, label: usize) -> Result<(), DataError> {
        if label >= self.num_classes {
            return Err(DataError::BadSample {
                id: self.samples[position].id,
                msg: format!("label {label} out of range for {} classes", self.num_classes),
            });
        }
        self.samples[position].label = label;
        Ok(())
    }

    /// Records the current observed label as `true_label` for every sample;
    /// noise injectors call this before flipping anything.
    pub fn snapshot_labels_as_truth(&mut self) {
        for s in &mut self.samples {
            s.true_label = Some(s.label);
        }
    }

    /// Fraction of samples whose observed label equals their true label, if
    /// every sample carries one.
    pub fn label_accuracy(&self) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        let mut correct = 0usize;
        for s in &self.samples {
            match s.true_label {
                Some(t) if t == s.label => correct += 1,
                Some(_) => {}
                None => return None,
            }
        }
        Some(correct as f64 / self.samples.len() as f64)
    }
}

fn infer_num_classes(records: &[Sample], meta: &DatasetMeta) -> usize {
    meta.num_classes.unwrap_or_else(|| {
        let mut max = 1;
        for s in records {
            max = max.max(s.label);
            if let Some(t) = s.true_label {
                max = max.max(t);
            }
        }
        max + 1
    })
}

/// Loads a dataset from JSONL or CSV. Ids are assigned in file order; labels
/// are checked against `meta.num_classes` when given, otherwise the class
/// count is inferred from the largest label in the file.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    meta: &DatasetMeta,
) -> Result<LabeledDataset, DataError> {
    let records = match format {
        DataFormat::Jsonl => read_jsonl(path)?,
        DataFormat::Csv => read_csv(path)?,
    };
    if records.is_empty() {
        return Err(DataError::BadDataset(format!(
            "{} contains no records",
            path.display()
        )));
    }
    let num_classes = infer_num_classes(&records, meta);
    for (i, s) in records.iter().enumerate() {
        let bad = if s.label >= num_classes {
            Some(s.label)
        } else {
            s.true_label.filter(|&t| t >= num_classes)
        };
        if let Some(label) = bad {
            return Err(DataError::LabelOutOfRange {
                path: path.display().to_string(),
                line: i + 1,
                label,
                num_classes,
            });
        }
    }
    LabeledDataset::new(records, num_classes, meta.class_names.clone())
}

fn read_jsonl(path: &Path) -> Result<Vec<Sample>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        out.push(Sample {
            id: out.len(),
            text: raw.text,
            features: raw.features,
            label: raw.label,
            true_label: raw.true_label,
        });
    }
    Ok(out)
}

fn read_csv(path: &Path) -> Result<Vec<Sample>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: e.to_string(),
        })?;
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let features_col = col("features").ok_or_else(|| DataError::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "missing 'features' column".into(),
    })?;
    let label_col = col("label").ok_or_else(|| DataError::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "missing 'label' column".into(),
    })?;
    let text_col = col("text");
    let true_col = col("true_label");

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2; // header is line 1
        let rec = rec.map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line,
            msg: e.to_string(),
        })?;
        let parse_err = |msg: String| DataError::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let features = rec
            .get(features_col)
            .unwrap_or("")
            .split(';')
            .filter(|t| !t.trim().is_empty())
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("feature '{t}': {e}")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let label = rec
            .get(label_col)
            .unwrap_or("")
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(format!("label: {e}")))?;
        let text = text_col
            .and_then(|c| rec.get(c))
            .filter(|t| !t.is_empty())
            .map(str::to_owned);
        let true_label = match true_col.and_then(|c| rec.get(c)).filter(|t| !t.trim().is_empty()) {
            Some(t) => Some(
                t.trim()
                    .parse::<usize>()
                    .map_err(|e| parse_err(format!("true_label: {e}")))?,
            ),
            None => None,
        };
        out.push(Sample {
            id: out.len(),
            text,
            features,
            label,
            true_label,
        });
    }
    Ok(out)
}

/// Writes a dataset as JSONL, one record per line, in sample order.
pub fn write_jsonl(ds: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for s in ds.samples() {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(w, "{line}").map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Splits into train/dev/test by seeded shuffle. Sizes follow the
/// floor-then-distribute rule: each split gets `floor(fraction * n)` and the
/// remainder goes to the largest fractional parts (ties in train, dev, test
/// order). Sample ids are preserved.
pub fn split_dataset(
    ds: &LabeledDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), DataError> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(DataError::BadFractions(
            fractions,
            "fractions must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = f.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(
            fractions,
            format!("fractions sum to {sum}, not 1"),
        ));
    }
    let n = ds.len();
    let mut counts = [0usize; 3];
    let mut remainders = [(0.0f64, 0usize); 3];
    for i in 0..3 {
        let exact = f[i] * n as f64;
        counts[i] = exact.floor() as usize;
        remainders[i] = (exact - exact.floor(), i);
    }
    let assigned: usize = counts.iter().sum();
    // Stable sort keeps train/dev/test order on equal remainders.
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for r in remainders.iter().take(n - assigned) {
        counts[r.1] += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed, "split"));
    let take = |range: std::ops::Range<usize>| -> Result<LabeledDataset, DataError> {
        let samples = order[range].iter().map(|&i| ds.samples()[i].clone()).collect();
        LabeledDataset::new(samples, ds.num_classes(), Some(ds.class_names().to_vec()))
    };
    let train = take(0..counts[0])?;
    let dev = take(counts[0]..counts[0] + counts[1])?;
    let test = take(counts[0] + counts[1]..n)?;
    Ok((train, dev, test))
}

/// Cosine similarity between two equal-length vectors; zero-norm inputs give
/// 0 by convention.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different widths");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: usize, features: Vec<f64>, label: usize) -> Sample {
        Sample {
            id,
            text: None,
            features,
            label,
            true_label: None,
        }
    }

    fn tiny_dataset(n: usize, k: usize) -> LabeledDataset {
        let samples = (0..n)
            .map(|i| sample(i, vec![i as f64, 1.0], i % k))
            .collect();
        LabeledDataset::new(samples, k, None).unwrap()
    }

    #[test]
    fn cosine_matches_hand_values() {
        // (1,0) vs (1,1): dot 1, norms 1 and sqrt(2).
        let got = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]);
        assert!((got - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        // (1,1,0) vs (0,1,1): dot 1, norms sqrt(2) each.
        let got = cosine_similarity(&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0]);
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn probability_vector_rejects_bad_input() {
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbabilityVector::new(vec![f64::NAN, 1.0]).is_err());
        assert!(ProbabilityVector::new(vec![]).is_err());
        assert!(ProbabilityVector::new(vec![0.25; 4]).is_ok());
    }

    #[test]
    fn argmax_ties_take_smallest_index() {
        let p = ProbabilityVector::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(p.argmax(), 0);
        let p = ProbabilityVector::new(vec![0.2, 0.4, 0.4]).unwrap();
        assert_eq!(p.argmax(), 1);
    }

    #[test]
    fn one_hot_mix_keeps_distribution() {
        let a = ProbabilityVector::one_hot(0, 3);
        let b = ProbabilityVector::one_hot(2, 3);
        let m = a.mix(&b, 0.7).unwrap();
        assert!((m.get(0) - 0.7).abs() < 1e-12);
        assert!((m.get(2) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn dataset_rejects_inconsistencies() {
        let dup = vec![sample(0, vec![1.0], 0), sample(0, vec![2.0], 1)];
        assert!(LabeledDataset::new(dup, 2, None).is_err());

        let ragged = vec![sample(0, vec![1.0], 0), sample(1, vec![1.0, 2.0], 1)];
        assert!(LabeledDataset::new(ragged, 2, None).is_err());

        let oor = vec![sample(0, vec![1.0], 5)];
        assert!(LabeledDataset::new(oor, 4, None).is_err());

        let nan = vec![sample(0, vec![f64::NAN], 0)];
        assert!(LabeledDataset::new(nan, 2, None).is_err());
    }

    #[test]
    fn jsonl_round_trip_preserves_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let mut ds = tiny_dataset(5, 3);
        ds.snapshot_labels_as_truth();
        write_jsonl(&ds, &path).unwrap();
        let meta = DatasetMeta {
            num_classes: Some(3),
            class_names: None,
        };
        let back = load_dataset(&path, DataFormat::Jsonl, &meta).unwrap();
        assert_eq!(back.samples(), ds.samples());
        assert_eq!(back.num_classes(), 3);
    }

    #[test]
    fn load_names_the_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"features": [1.0], "label": 0}}"#).unwrap();
        writeln!(f, r#"{{"features": [1.0], "label": 5}}"#).unwrap();
        let meta = DatasetMeta {
            num_classes: Some(4),
            class_names: None,
        };
        let err = load_dataset(&path, DataFormat::Jsonl, &meta).unwrap_err();
        match err {
            DataError::LabelOutOfRange { line, label, num_classes, .. } => {
                assert_eq!((line, label, num_classes), (2, 5, 4));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn csv_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "id,text,features,label,true_label").unwrap();
        writeln!(f, "0,hello,0.5;-1.25,1,0").unwrap();
        writeln!(f, "1,,2;3,0,").unwrap();
        let ds = load_dataset(&path, DataFormat::Csv, &DatasetMeta::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples()[0].features, vec![0.5, -1.25]);
        assert_eq!(ds.samples()[0].text.as_deref(), Some("hello"));
        assert_eq!(ds.samples()[0].true_label, Some(0));
        assert_eq!(ds.samples()[1].text, None);
        assert_eq!(ds.samples()[1].true_label, None);
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn split_sizes_follow_floor_then_distribute() {
        let ds = tiny_dataset(10, 2);
        let (tr, dev, te) = split_dataset(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr.len(), dev.len(), te.len()), (8, 1, 1));

        let ds = tiny_dataset(7, 2);
        let third = 1.0 / 3.0;
        let (tr, dev, te) = split_dataset(&ds, (third, third, third), 7).unwrap();
        // floors are 2,2,2; the leftover goes to the earliest split on ties.
        assert_eq!((tr.len(), dev.len(), te.len()), (3, 2, 2));
    }

    #[test]
    fn split_identity_fraction() {
        let ds = tiny_dataset(6, 2);
        let (tr, dev, te) = split_dataset(&ds, (1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!(tr.len(), 6);
        assert!(dev.is_empty() && te.is_empty());
        let mut ids: Vec<usize> = tr.samples().iter().map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = tiny_dataset(6, 2);
        assert!(split_dataset(&ds, (0.5, 0.2, 0.2), 3).is_err());
        assert!(split_dataset(&ds, (-0.1, 0.6, 0.5), 3).is_err());
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let ds = tiny_dataset(30, 3);
        let a = split_dataset(&ds, (0.6, 0.2, 0.2), 11).unwrap();
        let b = split_dataset(&ds, (0.6, 0.2, 0.2), 11).unwrap();
        assert_eq!(a.0.samples(), b.0.samples());
        assert_eq!(a.1.samples(), b.1.samples());
        assert_eq!(a.2.samples(), b.2.samples());
        let c = split_dataset(&ds, (0.6, 0.2, 0.2), 12).unwrap();
        assert_ne!(a.0.samples(), c.0.samples());
    }

    proptest! {
        #[test]
        fn split_covers_ids_exactly_once(n in 1usize..120, seed in 0u64..1000) {
            let ds = tiny_dataset(n, 2);
            let (tr, dev, te) = split_dataset(&ds, (0.7, 0.2, 0.1), seed).unwrap();
            let mut ids: Vec<usize> = tr
                .samples()
                .iter()
                .chain(dev.samples())
                .chain(te.samples())
                .map(|s| s.id)
                .collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn cosine_is_bounded_and_scale_invariant(
            a in proptest::collection::vec(-100.0f64..100.0, 1..8),
            scale in 0.01f64..50.0,
        ) {
            let b: Vec<f64> = a.iter().map(|v| v * scale).collect();
            let c = cosine_similarity(&a, &b);
            prop_assert!(c.abs() <= 1.0 + 1e-9);
            if a.iter().any(|v| *v != 0.0) {
                prop_assert!((c - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn mix_of_one_hots_is_valid(k in 2usize..6, i in 0usize..6, j in 0usize..6, lam in 0.0f64..=1.0) {
            let i = i % k;
            let j = j % k;
            let m = ProbabilityVector::one_hot(i, k)
                .mix(&ProbabilityVector::one_hot(j, k), lam)
                .unwrap();
            prop_assert!((m.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
