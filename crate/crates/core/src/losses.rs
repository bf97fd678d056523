//! Subset losses and their analytic gradients.
//!
//! The training objective sums three pieces, each normalized by the full
//! training-set size `N` rather than the subset size:
//!
//! * clean subset: ordinary cross-entropy under both learners,
//! * purified subset: reversed cross-entropy under both learners, where
//!   the undefined `ln 0` of a one-hot target is replaced by a negative
//!   constant `a`,
//! * hard subset: cross-entropy of the strong learner's classifier head on
//!   embedding-space mixtures of sample pairs, with soft mixed targets.
//!
//! Reversed cross-entropy is noise-tolerant because its per-sample loss
//! summed over all possible labels is the constant `-(K - 1) * a` for any
//! prediction, so uniform label noise shifts the objective by a constant.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, ProbabilityVector};
use crate::learner::{Learner, LearnerError, PROBABILITY_FLOOR};
use crate::seeds;
use crate::selection::PartitionResult;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("log-zero constant a = {0} must be finite and negative")]
    BadLogZero(f64),
    #[error("mixing concentration alpha = {0} must be finite and positive")]
    BadAlpha(f64),
    #[error("normalizer n_total must be positive")]
    BadNormalizer,
    #[error("label {label} out of range for {num_classes} classes (item {index})")]
    BadLabel {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("sample id {0} not present in the dataset")]
    UnknownId(usize),
    #[error("unknown loss family {0:?}, expected \"reversed-ce\" or \"ce\"")]
    UnknownFamily(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

/// Which per-sample loss the symmetry verifier evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    ReversedCrossEntropy,
    StandardCrossEntropy,
}

impl FromStr for LossFamily {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reversed-ce" | "rce" => Ok(Self::ReversedCrossEntropy),
            "ce" | "standard-ce" => Ok(Self::StandardCrossEntropy),
            other => Err(LossError::UnknownFamily(other.to_string())),
        }
    }
}

impl std::fmt::Display for LossFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::ReversedCrossEntropy => write!(f, "reversed-ce"),
            Self::StandardCrossEntropy => write!(f, "ce"),
        }
    }
}

fn check_a(a: f64) -> Result<(), LossError> {
    if !(a.is_finite() && a < 0.0) {
        return Err(LossError::BadLogZero(a));
    }
    Ok(())
}

/// Reversed cross-entropy of a prediction against a one-hot label: the
/// cross-entropy with the roles of prediction and target swapped, reading
/// `ln 0 := a`. Computed by its definition, summing `-p_k * a` over the
/// non-label classes.
pub fn reversed_ce(probs: &ProbabilityVector, label: usize, a: f64) -> f64 {
    let mut loss = 0.0;
    for k in 0..probs.len() {
        if k != label {
            loss -= probs.get(k) * a;
        }
    }
    loss
}

/// Ordinary cross-entropy of a prediction against a one-hot label.
pub fn standard_ce(probs: &ProbabilityVector, label: usize) -> f64 {
    -probs.get(label).max(PROBABILITY_FLOOR).ln()
}

/// The label-sum constant of reversed cross-entropy: for any prediction over
/// `k` classes, summing the loss across all candidate labels yields
/// `-(k - 1) * a`.
pub fn symmetry_constant(num_classes: usize, a: f64) -> f64 {
    -((num_classes - 1) as f64) * a
}

#[derive(Debug, Clone, Serialize)]
pub struct SymmetryReport {
    pub family: LossFamily,
    pub num_classes: usize,
    pub a: f64,
    pub trials: usize,
    /// For reversed cross-entropy, the analytic constant; for standard
    /// cross-entropy, the empirical mean of the label sums.
    pub expected_sum: f64,
    pub max_deviation: f64,
    pub symmetric: bool,
}

/// Samples random predictions (uniform over the simplex) and measures how
/// far the per-prediction label sum strays from a constant.
pub fn verify_symmetry(
    family: LossFamily,
    num_classes: usize,
    a: f64,
    trials: usize,
    seed: u64,
) -> Result<SymmetryReport, LossError> {
    check_a(a)?;
    if num_classes < 2 || trials == 0 {
        return Err(LossError::BadNormalizer);
    }
    let mut rng = seeds::rng(seed, "symmetry");
    let mut sums = Vec::with_capacity(trials);
    for _ in 0..trials {
        // Dirichlet(1, ..., 1): normalized unit exponentials.
        let mut raw: Vec<f64> = (0..num_classes)
            .map(|_| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        for v in &mut raw {
            *v /= total;
        }
        let p = ProbabilityVector::new(raw).expect("normalized positive vector");
        let sum: f64 = (0..num_classes)
            .map(|y| match family {
                LossFamily::ReversedCrossEntropy => reversed_ce(&p, y, a),
                LossFamily::StandardCrossEntropy => standard_ce(&p, y),
            })
            .sum();
        sums.push(sum);
    }
    let expected_sum = match family {
        LossFamily::ReversedCrossEntropy => symmetry_constant(num_classes, a),
        LossFamily::StandardCrossEntropy => sums.iter().sum::<f64>() / trials as f64,
    };
    let max_deviation = sums
        .iter()
        .map(|s| (s - expected_sum).abs())
        .fold(0.0, f64::max);
    Ok(SymmetryReport {
        family,
        num_classes,
        a,
        trials,
        expected_sum,
        max_deviation,
        symmetric: max_deviation < 1e-9,
    })
}

fn positions_of<'a>(
    ds: &'a LabeledDataset,
    ids: &BTreeSet<usize>,
) -> Result<Vec<&'a crate::data::Sample>, LossError> {
    ids.iter()
        .map(|&id| {
            ds.position_of(id)
                .map(|pos| &ds.samples()[pos])
                .ok_or(LossError::UnknownId(id))
        })
        .collect()
}

/// Cross-entropy of both learners on the clean subset, averaged over the
/// full training-set size.
pub fn loss_clean(
    strong: &Learner,
    weak: &Learner,
    ds: &LabeledDataset,
    ids: &BTreeSet<usize>,
    n_total: usize,
) -> Result<f64, LossError> {
    loss_clean_impl(strong, weak, ds, ids, n_total, None)
}

/// As [`loss_clean`], also accumulating gradients into `gs` and `gw`.
pub fn loss_clean_grad(
    strong: &Learner,
    weak: &Learner,
    ds: &LabeledDataset,
    ids: &BTreeSet<usize>,
    n_total: usize,
    gs: &mut [f64],
    gw: &mut [f64],
) -> Result<f64, LossError> {
    loss_clean_impl(strong, weak, ds, ids, n_total, Some((gs, gw)))
}

fn loss_clean_impl(
    strong: &Learner,
    weak: &Learner,
    ds: &LabeledDataset,
    ids: &BTreeSet<usize>,
    n_total: usize,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Result<f64, LossError> {
    if n_total == 0 {
        return Err(LossError::BadNormalizer);
    }
    let w = 1.0 / n_total as f64;
    let mut loss = 0.0;
    let mut grads = grads;
    for sample in positions_of(ds, ids)? {
        for learner in [strong, weak] {
            let probs = learner.probs(&sample.features)?;
            loss += w * standard_ce(&probs, sample.label);
            if let Some((gs, gw)) = grads.as_mut() {
                let k = learner.num_classes();
                let mut dlogits = vec![0.0; k];
                for c in 0..k {
                    let target = if c == sample.label { 1.0 } else { 0.0 };
                    dlogits[c] = w * (probs.get(c) - target);
                }
                let grad: &mut [f64] = match learner.kind() {
                    crate::learner::LearnerKind::Strong => gs,
                    crate::learner::LearnerKind::Weak => gw,
                };
                learner.accumulate_logit_grad(&sample.features, &dlogits, grad)?;
            }
        }
    }
    Ok(loss)
}

/// Reversed cross-entropy of both learners on the purified subset, averaged
/// over the full training-set size.
pub fn loss_purified(
    strong: &Learner,
    weak: &Learner,
    ds: &LabeledDataset,
    ids: &BTreeSet<usize>,
    n_total: usize,
    a: f64,
) -> Result<f64, LossError> {
    loss_purified_impl(strong, weak, ds, ids, n_total, a, None)
}

/// As [`loss_purified`], also accumulating gradients into `gs` and `gw`.
pub fn loss_purified_grad(
    strong: &Learner,
    weak: &Learner,
    ds: &LabeledDataset,
    ids: &BTreeSet<usize>,
    n_total: usize,
    a: f64,
    gs: &mut [f64],
    gw: &mut [f64],
) -> Result<f64, LossError> {
    loss_purified_impl(strong, weak, ds, ids, n_total, a, Some((gs, gw)))
}

fn loss_purified_impl(
    strong: &Learner,
    weak: &Learner,
    ds: &LabeledDataset,
    ids: &BTreeSet<usize>,
    n_total: usize,
    a: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Result<f64, LossError> {
    check_a(a)?;
    if n_total == 0 {
        return Err(LossError::BadNormalizer);
    }
    let w = 1.0 / n_total as f64;
    let mut loss = 0.0;
    let mut grads = grads;
    for sample in positions_of(ds, ids)? {
        for learner in [strong, weak] {
            let probs = learner.probs(&sample.features)?;
            loss += w * reversed_ce(&probs, sample.label, a);
            if let Some((gs, gw)) = grads.as_mut() {
                // d/dz_k of -a * (1 - p_y) is a * p_y * (delta_ky - p_k).
                let k = learner.num_classes();
                let py = probs.get(sample.label);
                let mut dlogits = vec![0.0; k];
                for c in 0..k {
                    let delta = if c == sample.label { 1.0 } else { 0.0 };
                    dlogits[c] = w * a * py * (delta - probs.get(c));
                }
                let grad: &mut [f64] = match learner.kind() {
                    crate::learner::LearnerKind::Strong => gs,
                    crate::learner::LearnerKind::Weak => gw,
                };
                learner.accumulate_logit_grad(&sample.features, &dlogits, grad)?;
            }
        }
    }
    Ok(loss)
}

/// One embedding-space mixture: a convex combination of two source
/// embeddings and the matching soft target. `source` holds indices into the
/// batch that produced it.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub embedding: Vec<f64>,
    pub target: ProbabilityVector,
    /// The mixing coefficient after folding to [0.5, 1], applied to the
    /// first source.
    pub lambda: f64,
    pub source: (usize, usize),
}

/// Builds one embedding mixture per batch item. For item `i` a partner `j`
/// is drawn uniformly with replacement, then a Beta(alpha, alpha) coefficient
/// folded to `max(lambda, 1 - lambda)` blends embeddings and one-hot targets.
pub fn embmix(
    strong: &Learner,
    items: &[(&[f64], usize)],
    alpha: f64,
    seed: u64,
) -> Result<Vec<MixedSample>, LossError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(LossError::BadAlpha(alpha));
    }
    let k = strong.num_classes();
    for (index, &(_, label)) in items.iter().enumerate() {
        if label >= k {
            return Err(LossError::BadLabel {
                index,
                label,
                num_classes: k,
            });
        }
    }
    let embeddings: Vec<Vec<f64>> = items
        .iter()
        .map(|(features, _)| strong.embed(features))
        .collect::<Result<_, _>>()?;
    let beta = Beta::new(alpha, alpha).map_err(|_| LossError::BadAlpha(alpha))?;
    let mut rng = seeds::rng(seed, "embmix");
    let n = items.len();
    let mut mixed = Vec::with_capacity(n);
    for i in 0..n {
        let j = rng.random_range(0..n);
        let raw: f64 = beta.sample(&mut rng);
        let lambda = raw.max(1.0 - raw);
        let embedding: Vec<f64> = embeddings[i]
            .iter()
            .zip(&embeddings[j])
            .map(|(ei, ej)| lambda * ei + (1.0 - lambda) * ej)
            .collect();
        let yi = ProbabilityVector::one_hot(items[i].1, k);
        let yj = ProbabilityVector::one_hot(items[j].1, k);
        let target = yi
            .mix(&yj, lambda)
            .expect("one-hot targets of equal width mix cleanly");
        mixed.push(MixedSample {
            embedding,
            target,
            lambda,
            source: (i, j),
        });
    }
    Ok(mixed)
}

/// Cross-entropy of the strong learner's head on embedding mixtures of the
/// hard subset, averaged over the full training-set size. The same `seed`
/// always reproduces the same mixtures.
pub fn loss_hard(
    strong: &Learner,
    items: &[(&[f64], usize)],
    n_total: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64, LossError> {
    loss_hard_impl(strong, items, n_total, alpha, seed, None)
}

/// As [`loss_hard`], also accumulating the strong learner's gradient. The
/// gradient flows through the classifier head and back through both source
/// embeddings into the hidden layer.
pub fn loss_hard_grad(
    strong: &Learner,
    items: &[(&[f64], usize)],
    n_total: usize,
    alpha: f64,
    seed: u64,
    gs: &mut [f64],
) -> Result<f64, LossError> {
    loss_hard_impl(strong, items, n_total, alpha, seed, Some(gs))
}

fn loss_hard_impl(
    strong: &Learner,
    items: &[(&[f64], usize)],
    n_total: usize,
    alpha: f64,
    seed: u64,
    mut gs: Option<&mut [f64]>,
) -> Result<f64, LossError> {
    if n_total == 0 {
        return Err(LossError::BadNormalizer);
    }
    if items.is_empty() {
        // Still validate alpha so a bad config fails regardless of subset sizes.
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LossError::BadAlpha(alpha));
        }
        return Ok(0.0);
    }
    let mixed = embmix(strong, items, alpha, seed)?;
    let embeddings: Vec<Vec<f64>> = items
        .iter()
        .map(|(features, _)| strong.embed(features))
        .collect::<Result<_, _>>()?;
    let w = 1.0 / n_total as f64;
    let k = strong.num_classes();
    let mut loss = 0.0;
    for m in &mixed {
        let probs = strong.head_probs(&m.embedding)?;
        for c in 0..k {
            let q = m.target.get(c);
            if q > 0.0 {
                loss -= w * q * probs[c].max(PROBABILITY_FLOOR).ln();
            }
        }
        if let Some(gs) = gs.as_mut() {
            let mut dlogits = vec![0.0; k];
            for c in 0..k {
                dlogits[c] = w * (probs[c] - m.target.get(c));
            }
            let dmixed = strong.accumulate_head_grad(&m.embedding, &dlogits, gs)?;
            let (i, j) = m.source;
            let di: Vec<f64> = dmixed.iter().map(|d| d * m.lambda).collect();
            let dj: Vec<f64> = dmixed.iter().map(|d| d * (1.0 - m.lambda)).collect();
            strong.accumulate_embed_grad(items[i].0, &embeddings[i], &di, gs)?;
            strong.accumulate_embed_grad(items[j].0, &embeddings[j], &dj, gs)?;
        }
    }
    Ok(loss)
}

/// The three subset losses of one combined step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clean: f64,
    pub purified: f64,
    pub hard: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.clean + self.purified + self.hard
    }
}

fn hard_items<'a>(
    ds: &'a LabeledDataset,
    part: &PartitionResult,
) -> Result<Vec<(&'a [f64], usize)>, LossError> {
    positions_of(ds, &part.hard)?
        .into_iter()
        .map(|s| Ok((s.features.as_slice(), s.label)))
        .collect()
}

/// Evaluates all three subset losses for one partition.
pub fn total_loss(
    strong: &Learner,
    weak: &Learner,
    ds: &LabeledDataset,
    part: &PartitionResult,
    a: f64,
    alpha: f64,
    seed: u64,
) -> Result<LossBreakdown, LossError> {
    let n = ds.len();
    Ok(LossBreakdown {
        clean: loss_clean(strong, weak, ds, &part.clean, n)?,
        purified: loss_purified(strong, weak, ds, &part.purified, n, a)?,
        hard: loss_hard(strong, &hard_items(ds, part)?, n, alpha, seed)?,
    })
}

/// Evaluates all three subset losses and accumulates both learners'
/// gradients. The hard term only touches the strong learner.
pub fn total_loss_grad(
    strong: &Learner,
    weak: &Learner,
    ds: &LabeledDataset,
    part: &PartitionResult,
    a: f64,
    alpha: f64,
    seed: u64,
    gs: &mut [f64],
    gw: &mut [f64],
) -> Result<LossBreakdown, LossError> {
    let n = ds.len();
    Ok(LossBreakdown {
        clean: loss_clean_grad(strong, weak, ds, &part.clean, n, gs, gw)?,
        purified: loss_purified_grad(strong, weak, ds, &part.purified, n, a, gs, gw)?,
        hard: loss_hard_grad(strong, &hard_items(ds, part)?, n, alpha, seed, gs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::synth::{generate_blobs, BlobSpec};

    #[test]
    fn reversed_ce_matches_closed_form() {
        let p = ProbabilityVector::new(vec![0.7, 0.2, 0.1]).unwrap();
        let a = -4.0;
        // Definition sums -p_k * a over non-label classes; closed form is
        // -a * (1 - p_y).
        assert!((reversed_ce(&p, 0, a) - 1.2).abs() < 1e-12);
        for y in 0..3 {
            let closed = -a * (1.0 - p.get(y));
            assert!((reversed_ce(&p, y, a) - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn reversed_ce_label_sum_is_constant() {
        let mut rng = crate::seeds::rng(11, "rce-sum");
        for _ in 0..100 {
            let raw: Vec<f64> = (0..5).map(|_| rand::Rng::random::<f64>(&mut rng) + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let p = ProbabilityVector::new(raw.iter().map(|v| v / total).collect()).unwrap();
            let sum: f64 = (0..5).map(|y| reversed_ce(&p, y, -4.0)).sum();
            assert!((sum - symmetry_constant(5, -4.0)).abs() < 1e-12, "{sum}");
        }
    }

    #[test]
    fn verify_symmetry_separates_the_families() {
        let rce = verify_symmetry(LossFamily::ReversedCrossEntropy, 4, -4.0, 500, 3).unwrap();
        assert!(rce.symmetric, "max deviation {}", rce.max_deviation);
        assert!((rce.expected_sum - 12.0).abs() < 1e-12);
        let ce = verify_symmetry(LossFamily::StandardCrossEntropy, 4, -4.0, 500, 3).unwrap();
        assert!(!ce.symmetric);
        assert!(ce.max_deviation > 0.1);
    }

    #[test]
    fn loss_family_parses() {
        assert_eq!("reversed-ce".parse::<LossFamily>().unwrap(), LossFamily::ReversedCrossEntropy);
        assert_eq!("ce".parse::<LossFamily>().unwrap(), LossFamily::StandardCrossEntropy);
        assert!("focal".parse::<LossFamily>().is_err());
    }

    fn tiny_dataset() -> LabeledDataset {
        let samples = (0..4)
            .map(|id| Sample {
                id,
                text: None,
                features: vec![id as f64 - 1.5, 0.5],
                label: id % 2,
                true_label: None,
            })
            .collect();
        LabeledDataset::new(samples, 2, None).unwrap()
    }

    fn zeroed(mut l: Learner) -> Learner {
        for p in l.params_mut() {
            *p = 0.0;
        }
        l
    }

    #[test]
    fn clean_loss_on_uniform_learners_is_ln_k() {
        // Uniform predictions give per-learner CE of ln 2; two samples out
        // of four with two learners: 2 * 2 * ln2 / 4 = ln 2.
        let ds = tiny_dataset();
        let strong = zeroed(Learner::strong(2, 3, 2, 0).unwrap());
        let weak = zeroed(Learner::weak(2, None, 2, 0).unwrap());
        let ids = BTreeSet::from([0, 1]);
        let loss = loss_clean(&strong, &weak, &ds, &ids, ds.len()).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn purified_loss_on_uniform_learners_matches_hand_value() {
        // Uniform predictions: per learner -a * (1 - 1/K); three samples,
        // N = 4, a = -4, K = 2 gives 3 * 2 * 4 * 0.5 / 4 = 3.
        let ds = tiny_dataset();
        let strong = zeroed(Learner::strong(2, 3, 2, 0).unwrap());
        let weak = zeroed(Learner::weak(2, None, 2, 0).unwrap());
        let ids = BTreeSet::from([0, 1, 2]);
        let loss = loss_purified(&strong, &weak, &ds, &ids, ds.len(), -4.0).unwrap();
        assert!((loss - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_subsets_cost_nothing() {
        let ds = tiny_dataset();
        let strong = Learner::strong(2, 3, 2, 1).unwrap();
        let weak = Learner::weak(2, None, 2, 1).unwrap();
        let empty = BTreeSet::new();
        assert_eq!(loss_clean(&strong, &weak, &ds, &empty, 4).unwrap(), 0.0);
        assert_eq!(loss_purified(&strong, &weak, &ds, &empty, 4, -4.0).unwrap(), 0.0);
        assert_eq!(loss_hard(&strong, &[], 4, 0.75, 9).unwrap(), 0.0);
    }

    #[test]
    fn bad_constants_are_rejected() {
        let ds = tiny_dataset();
        let strong = Learner::strong(2, 3, 2, 1).unwrap();
        let weak = Learner::weak(2, None, 2, 1).unwrap();
        let ids = BTreeSet::from([0]);
        assert!(matches!(
            loss_purified(&strong, &weak, &ds, &ids, 4, 0.5),
            Err(LossError::BadLogZero(_))
        ));
        assert!(matches!(
            loss_purified(&strong, &weak, &ds, &ids, 4, f64::NAN),
            Err(LossError::BadLogZero(_))
        ));
        assert!(matches!(
            loss_hard(&strong, &[], 4, -1.0, 0),
            Err(LossError::BadAlpha(_))
        ));
        assert!(matches!(
            loss_clean(&strong, &weak, &ds, &ids, 0),
            Err(LossError::BadNormalizer)
        ));
        assert!(matches!(
            loss_clean(&strong, &weak, &ds, &BTreeSet::from([99]), 4),
            Err(LossError::UnknownId(99))
        ));
    }

    #[test]
    fn embmix_is_seed_deterministic_and_folded() {
        let strong = Learner::strong(2, 4, 3, 7).unwrap();
        let feats: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -0.5 * i as f64]).collect();
        let items: Vec<(&[f64], usize)> = feats.iter().map(|f| (f.as_slice(), 1usize)).collect();
        let a = embmix(&strong, &items, 0.75, 42).unwrap();
        let b = embmix(&strong, &items, 0.75, 42).unwrap();
        let c = embmix(&strong, &items, 0.75, 43).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.lambda.to_bits(), y.lambda.to_bits());
            assert_eq!(x.source, y.source);
            for (u, v) in x.embedding.iter().zip(&y.embedding) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        assert!(a.iter().zip(&c).any(|(x, y)| x.lambda != y.lambda || x.source != y.source));
        for m in &a {
            assert!(m.lambda >= 0.5 && m.lambda <= 1.0, "lambda {}", m.lambda);
            assert_eq!(m.source.0, a.iter().position(|x| std::ptr::eq(x, m)).unwrap());
        }
    }

    #[test]
    fn embmix_targets_blend_the_two_labels() {
        let strong = Learner::strong(1, 2, 3, 1).unwrap();
        let feats = [vec![1.0], vec![-1.0]];
        let items: Vec<(&[f64], usize)> = vec![(&feats[0], 0), (&feats[1], 2)];
        for m in embmix(&strong, &items, 0.75, 5).unwrap() {
            let (i, j) = m.source;
            let yi = items[i].1;
            let yj = items[j].1;
            let expect_i = if yi == yj { 1.0 } else { m.lambda };
            assert!((m.target.get(yi) - expect_i).abs() < 1e-12);
            assert!((m.target.get(1) - 0.0).abs() < 1e-12);
        }
    }

    fn fd_check<F>(learner: &Learner, analytic: &[f64], eval: F, coords: &[usize])
    where
        F: Fn(&Learner) -> f64,
    {
        let eps = 1e-6;
        for &i in coords {
            let mut plus = learner.clone();
            plus.params_mut()[i] += eps;
            let mut minus = learner.clone();
            minus.params_mut()[i] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let denom = analytic[i].abs().max(1e-8);
            let rel = (fd - analytic[i]).abs() / denom.max(1.0);
            assert!(
                rel < 1e-5,
                "coord {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let ds = generate_blobs(&BlobSpec {
            n: 12,
            centers: vec![vec![1.0, 0.5], vec![-1.0, -0.5], vec![0.5, -1.0]],
            sigma: 0.6,
            seed: 4,
        })
        .unwrap();
        let strong = Learner::strong(2, 5, 3, 21).unwrap();
        let weak = Learner::weak(2, None, 3, 22).unwrap();
        let clean = BTreeSet::from([0, 3, 5]);
        let purified = BTreeSet::from([1, 7]);
        let hard_ids = [2usize, 4, 9];
        let hard: Vec<(&[f64], usize)> = hard_ids
            .iter()
            .map(|&id| {
                let s = &ds.samples()[ds.position_of(id).unwrap()];
                (s.features.as_slice(), s.label)
            })
            .collect();

        let mut gs = strong.zero_grad();
        let mut gw = weak.zero_grad();
        loss_clean_grad(&strong, &weak, &ds, &clean, 12, &mut gs, &mut gw).unwrap();
        fd_check(&strong, &gs, |l| loss_clean(l, &weak, &ds, &clean, 12).unwrap(), &[0, 7, 13, 30]);
        fd_check(&weak, &gw, |l| loss_clean(&strong, l, &ds, &clean, 12).unwrap(), &[0, 2, 5]);

        let mut gs = strong.zero_grad();
        let mut gw = weak.zero_grad();
        loss_purified_grad(&strong, &weak, &ds, &purified, 12, -4.0, &mut gs, &mut gw).unwrap();
        fd_check(&strong, &gs, |l| loss_purified(l, &weak, &ds, &purified, 12, -4.0).unwrap(), &[1, 8, 14, 31]);
        fd_check(&weak, &gw, |l| loss_purified(&strong, l, &ds, &purified, 12, -4.0).unwrap(), &[1, 3, 5]);

        let mut gs = strong.zero_grad();
        loss_hard_grad(&strong, &hard, 12, 0.75, 99, &mut gs).unwrap();
        fd_check(
            &strong,
            &gs,
            |l| loss_hard(l, &hard, 12, 0.75, 99).unwrap(),
            &[0, 4, 9, 12, 17, 25, 32],
        );
    }

    #[test]
    fn total_loss_matches_its_parts() {
        let ds = generate_blobs(&BlobSpec {
            n: 16,
            centers: vec![vec![1.5, 0.0], vec![-1.5, 0.0]],
            sigma: 0.5,
            seed: 6,
        })
        .unwrap();
        let strong = Learner::strong(2, 4, 2, 31).unwrap();
        let weak = Learner::weak(2, None, 2, 32).unwrap();
        let part = PartitionResult {
            consistency: BTreeSet::from([0, 1, 2, 3]),
            discrepancy: BTreeSet::from([4, 5, 6]),
            clean: BTreeSet::from([0, 1]),
            purified: BTreeSet::from([2, 3]),
            hard: BTreeSet::from([4, 6]),
            phi: 0.1,
        };
        let breakdown = total_loss(&strong, &weak, &ds, &part, -4.0, 0.75, 17).unwrap();
        let n = ds.len();
        let clean = loss_clean(&strong, &weak, &ds, &part.clean, n).unwrap();
        let purified = loss_purified(&strong, &weak, &ds, &part.purified, n, -4.0).unwrap();
        let hard_items: Vec<(&[f64], usize)> = [4usize, 6]
            .iter()
            .map(|&id| {
                let s = &ds.samples()[ds.position_of(id).unwrap()];
                (s.features.as_slice(), s.label)
            })
            .collect();
        let hard = loss_hard(&strong, &hard_items, n, 0.75, 17).unwrap();
        assert_eq!(breakdown.clean.to_bits(), clean.to_bits());
        assert_eq!(breakdown.purified.to_bits(), purified.to_bits());
        assert_eq!(breakdown.hard.to_bits(), hard.to_bits());
        assert!((breakdown.total() - (clean + purified + hard)).abs() < 1e-15);

        let mut gs = strong.zero_grad();
        let mut gw = weak.zero_grad();
        let again = total_loss_grad(&strong, &weak, &ds, &part, -4.0, 0.75, 17, &mut gs, &mut gw).unwrap();
        assert_eq!(again.total().to_bits(), breakdown.total().to_bits());
        assert!(gs.iter().any(|g| *g != 0.0));
        assert!(gw.iter().any(|g| *g != 0.0));
    }
}
