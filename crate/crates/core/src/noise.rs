//! Label-noise injectors.
//!
//! All three injectors snapshot the current observed labels into
//! `true_label` before flipping anything, so the result always carries the
//! audit channel. `rate` is the marginal flip probability in [0, 1).
//!
//! * symmetric: keep the label with probability `1 - rate`, otherwise move
//!   to one of the other `K - 1` classes uniformly;
//! * asymmetric: draw the new label from a row-stochastic transition matrix
//!   whose diagonal is `1 - rate` (default: cyclic shift to the next class);
//! * instance-dependent: flip exactly `ceil(rate * N)` samples, chosen among
//!   those a scorer model disagrees with, to the scorer's argmax.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::learner::{Learner, LearnerError, TrainItem};
use crate::data::ProbabilityVector;
use crate::seeds;

#[derive(Debug, thiserror::Error)]
pub enum NoiseError {
    #[error("noise rate {0} outside [0, 1)")]
    BadRate(f64),
    #[error("transition matrix: {0}")]
    BadTransition(String),
    #[error(
        "instance-dependent injection needs {needed} eligible samples (scorer argmax != label), found {available}"
    )]
    InsufficientEligible { needed: usize, available: usize },
    #[error("scorer: {0}")]
    Scorer(#[from] LearnerError),
    #[error("dataset: {0}")]
    Data(#[from] crate::data::DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
    Instance,
}

impl std::str::FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "symmetric" => Ok(Self::Symmetric),
            "asymmetric" => Ok(Self::Asymmetric),
            "instance" | "idn" => Ok(Self::Instance),
            other => Err(format!(
                "unknown noise kind '{other}' (expected symmetric, asymmetric or instance)"
            )),
        }
    }
}

/// Declarative noise description, embeddable in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Optional K x K row-stochastic matrix for asymmetric noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
}

impl NoiseSpec {
    /// Applies this spec to a dataset. Instance-dependent noise trains the
    /// default scorer (see [`default_instance_scorer`]) on the input labels.
    pub fn apply(&self, ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset, NoiseError> {
        match self.kind {
            NoiseKind::Symmetric => inject_symmetric(ds, self.rate, seed),
            NoiseKind::Asymmetric => inject_asymmetric(ds, self.rate, self.transition.as_deref(), seed),
            NoiseKind::Instance => {
                let scorer = default_instance_scorer(ds, seeds::mix(seed, "idn-scorer"))?;
                inject_instance_dependent(ds, self.rate, &scorer, seed)
            }
        }
    }
}

fn check_rate(rate: f64) -> Result<(), NoiseError> {
    if !(rate.is_finite() && (0.0..1.0).contains(&rate)) {
        return Err(NoiseError::BadRate(rate));
    }
    Ok(())
}

/// Uniform label noise at the given rate.
pub fn inject_symmetric(
    ds: &LabeledDataset,
    rate: f64,
    seed: u64,
) -> Result<LabeledDataset, NoiseError> {
    check_rate(rate)?;
    let k = ds.num_classes();
    let mut out = ds.clone();
    out.snapshot_labels_as_truth();
    let mut rng = seeds::rng(seed, "noise-symmetric");
    for pos in 0..out.len() {
        if rng.random::<f64>() < rate {
            let old = out.samples()[pos].label;
            let offset = rng.random_range(0..k - 1);
            out.set_label(pos, (old + 1 + offset) % k)?;
        }
    }
    Ok(out)
}

/// The default asymmetric transition: stay with probability `1 - rate`,
/// otherwise move to the next class cyclically.
pub fn cyclic_transition(num_classes: usize, rate: f64) -> Vec<Vec<f64>> {
    let mut t = vec![vec![0.0; num_classes]; num_classes];
    for (i, row) in t.iter_mut().enumerate() {
        row[i] = 1.0 - rate;
        row[(i + 1) % num_classes] = rate;
    }
    t
}

fn check_transition(t: &[Vec<f64>], num_classes: usize, rate: f64) -> Result<(), NoiseError> {
    if t.len() != num_classes || t.iter().any(|r| r.len() != num_classes) {
        return Err(NoiseError::BadTransition(format!(
            "matrix must be {num_classes} x {num_classes}"
        )));
    }
    for (i, row) in t.iter().enumerate() {
        if row.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
            return Err(NoiseError::BadTransition(format!("row {i} has a negative or non-finite entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(NoiseError::BadTransition(format!("row {i} sums to {sum}, not 1")));
        }
        if (row[i] - (1.0 - rate)).abs() > 1e-9 {
            return Err(NoiseError::BadTransition(format!(
                "row {i} diagonal {} must equal 1 - rate = {}",
                row[i],
                1.0 - rate
            )));
        }
    }
    Ok(())
}

/// Class-conditional noise from a row-stochastic transition matrix
/// (diagonal `1 - rate`); `None` uses the cyclic default.
pub fn inject_asymmetric(
    ds: &LabeledDataset,
    rate: f64,
    transition: Option<&[Vec<f64>]>,
    seed: u64,
) -> Result<LabeledDataset, NoiseError> {
    check_rate(rate)?;
    let k = ds.num_classes();
    let default;
    let t = match transition {
        Some(t) => t,
        None => {
            default = cyclic_transition(k, rate);
            &default
        }
    };
    check_transition(t, k, rate)?;
    let mut out = ds.clone();
    out.snapshot_labels_as_truth();
    let mut rng = seeds::rng(seed, "noise-asymmetric");
    for pos in 0..out.len() {
        let row = &t[out.samples()[pos].label];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut dst = k - 1;
        for (c, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                dst = c;
                break;
            }
        }
        out.set_label(pos, dst)?;
    }
    Ok(out)
}

/// Instance-dependent noise: flips exactly `ceil(rate * N)` samples, picked
/// uniformly among those where the scorer's argmax disagrees with the
/// current label, to the scorer's argmax.
pub fn inject_instance_dependent(
    ds: &LabeledDataset,
    rate: f64,
    scorer: &Learner,
    seed: u64,
) -> Result<LabeledDataset, NoiseError> {
    check_rate(rate)?;
    let needed = (rate * ds.len() as f64).ceil() as usize;
    let mut eligible = Vec::new();
    let mut targets = vec![0usize; ds.len()];
    for (pos, s) in ds.samples().iter().enumerate() {
        let pred = scorer.predict_confidence(s)?;
        if pred.predicted != s.label {
            eligible.push(pos);
            targets[pos] = pred.predicted;
        }
    }
    if eligible.len() < needed {
        return Err(NoiseError::InsufficientEligible {
            needed,
            available: eligible.len(),
        });
    }
    let mut out = ds.clone();
    out.snapshot_labels_as_truth();
    eligible.shuffle(&mut seeds::rng(seed, "noise-instance"));
    for &pos in eligible.iter().take(needed) {
        out.set_label(pos, targets[pos])?;
    }
    Ok(out)
}

/// The default scorer for instance-dependent noise: a weak learner given two
/// short full-batch training passes (60 steps each, lr 1.0) on the current
/// labels.
pub fn default_instance_scorer(ds: &LabeledDataset, seed: u64) -> Result<Learner, NoiseError> {
    let mut scorer = Learner::weak(ds.feature_dim(), None, ds.num_classes(), seed)?;
    let targets: Vec<ProbabilityVector> = ds
        .samples()
        .iter()
        .map(|s| ProbabilityVector::one_hot(s.label, ds.num_classes()))
        .collect();
    let weight = 1.0 / ds.len() as f64;
    let batch: Vec<TrainItem> = ds
        .samples()
        .iter()
        .zip(&targets)
        .map(|(s, t)| TrainItem {
            features: &s.features,
            target: t,
            weight,
        })
        .collect();
    for _ in 0..2 * 60 {
        scorer.train_step(&batch, 1.0)?;
    }
    Ok(scorer)
}
