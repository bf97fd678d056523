//! Sample selection: per-sample dynamic thresholds, a two-component Gaussian
//! mixture over per-sample losses, and the subset partition they induce.
//!
//! Each epoch a sample is "consistent" when both learners put more mass on
//! its observed label than their per-sample thresholds, and "discrepant"
//! when exactly one does. The mixture's low-loss component gives every
//! sample a clean probability `o`; `o >= phi` routes consistent samples to
//! the clean subset and discrepant ones to the hard subset, while
//! `o < phi` sends consistent samples to the purified subset for relabeling.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::learner::LearnerKind;

/// Variance floor inside the mixture fit.
pub const GMM_VARIANCE_FLOOR: f64 = 1e-6;
/// EM stops when the log-likelihood improves by less than this.
pub const GMM_CONVERGENCE_TOLERANCE: f64 = 1e-6;
/// Hard cap on EM iterations.
pub const GMM_MAX_ITERATIONS: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("smoothing factor {0} outside [0, 1]")]
    BadLambda(f64),
    #[error("clean-probability threshold {0} outside [0, 1]")]
    BadPhi(f64),
    #[error("confidence {value} for sample {id} ({kind:?}) outside [0, 1]")]
    BadConfidence {
        id: usize,
        kind: LearnerKind,
        value: f64,
    },
    #[error("mixture fit needs at least 4 losses, got {0}")]
    TooFewSamples(usize),
    #[error("mixture fit: loss distribution is degenerate (all values within {0:e})")]
    DegenerateLosses(f64),
    #[error("mixture fit: non-finite loss at position {0}")]
    NonFiniteLoss(usize),
    #[error("partition input missing {what} for sample {id}")]
    MissingEntry { id: usize, what: &'static str },
    #[error("partition inputs disagree: {0}")]
    InconsistentIds(String),
}

/// Per-sample, per-learner exponential moving average of the max confidence:
/// `tau_t = lambda * p_t + (1 - lambda) * tau_{t-1}`, starting at 0.
#[derive(Debug, Clone)]
pub struct ThresholdState {
    lambda_strong: f64,
    lambda_weak: f64,
    taus: HashMap<(usize, LearnerKind), f64>,
}

impl ThresholdState {
    pub fn new(lambda_strong: f64, lambda_weak: f64) -> Result<Self, SelectionError> {
        for l in [lambda_strong, lambda_weak] {
            if !(l.is_finite() && (0.0..=1.0).contains(&l)) {
                return Err(SelectionError::BadLambda(l));
            }
        }
        Ok(Self {
            lambda_strong,
            lambda_weak,
            taus: HashMap::new(),
        })
    }

    pub fn lambda(&self, kind: LearnerKind) -> f64 {
        match kind {
            LearnerKind::Strong => self.lambda_strong,
            LearnerKind::Weak => self.lambda_weak,
        }
    }

    /// Current threshold; unseen (id, kind) pairs start at 0.
    pub fn tau(&self, id: usize, kind: LearnerKind) -> f64 {
        self.taus.get(&(id, kind)).copied().unwrap_or(0.0)
    }

    /// Folds this epoch's max confidence into the threshold and returns the
    /// new value.
    pub fn update(
        &mut self,
        id: usize,
        kind: LearnerKind,
        confidence: f64,
    ) -> Result<f64, SelectionError> {
        if !(confidence.is_finite() && (0.0..=1.0).contains(&confidence)) {
            return Err(SelectionError::BadConfidence {
                id,
                kind,
                value: confidence,
            });
        }
        let lambda = self.lambda(kind);
        let prev = self.tau(id, kind);
        let tau = lambda * confidence + (1.0 - lambda) * prev;
        self.taus.insert((id, kind), tau);
        Ok(tau)
    }

    pub fn tracked(&self) -> usize {
        self.taus.len()
    }
}

/// A fitted two-component 1-D Gaussian mixture; component 0 is the smaller
/// mean ("clean") side.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub iterations: usize,
    /// Log-likelihood after every EM iteration.
    pub log_likelihoods: Vec<f64>,
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
}

/// Fits the mixture by EM. Initialization splits the sorted losses at the
/// median; E-steps run in log space so widely separated components cannot
/// underflow to 0/0.
pub fn fit_loss_gmm(losses: &[f64]) -> Result<GmmFit, SelectionError> {
    let n = losses.len();
    if n < 4 {
        return Err(SelectionError::TooFewSamples(n));
    }
    if let Some(pos) = losses.iter().position(|l| !l.is_finite()) {
        return Err(SelectionError::NonFiniteLoss(pos));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted[n - 1] - sorted[0] < 1e-12 {
        return Err(SelectionError::DegenerateLosses(1e-12));
    }

    let half = n.div_ceil(2);
    let moments = |xs: &[f64]| {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        (mean, var.max(GMM_VARIANCE_FLOOR))
    };
    let (m0, v0) = moments(&sorted[..half]);
    let (m1, v1) = moments(&sorted[half..]);
    let mut means = [m0, m1];
    let mut vars = [v0, v1];
    let mut weights: [f64; 2] = [0.5, 0.5];

    let mut resp = vec![0.0; n]; // responsibility of component 0
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    for _ in 0..GMM_MAX_ITERATIONS {
        iterations += 1;
        // E step in log space.
        let mut ll = 0.0;
        for (i, &x) in losses.iter().enumerate() {
            let l0 = weights[0].max(f64::MIN_POSITIVE).ln() + log_normal_pdf(x, means[0], vars[0]);
            let l1 = weights[1].max(f64::MIN_POSITIVE).ln() + log_normal_pdf(x, means[1], vars[1]);
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            resp[i] = e0 / (e0 + e1);
            ll += m + (e0 + e1).ln();
        }
        trace.push(ll);
        // M step.
        for c in 0..2 {
            let mut nk = 0.0;
            let mut sum = 0.0;
            for (i, &x) in losses.iter().enumerate() {
                let r = if c == 0 { resp[i] } else { 1.0 - resp[i] };
                nk += r;
                sum += r * x;
            }
            if nk > 1e-12 {
                let mean = sum / nk;
                let mut var = 0.0;
                for (i, &x) in losses.iter().enumerate() {
                    let r = if c == 0 { resp[i] } else { 1.0 - resp[i] };
                    var += r * (x - mean) * (x - mean);
                }
                means[c] = mean;
                vars[c] = (var / nk).max(GMM_VARIANCE_FLOOR);
            }
            weights[c] = nk / n as f64;
        }
        if (ll - prev_ll).abs() < GMM_CONVERGENCE_TOLERANCE {
            break;
        }
        prev_ll = ll;
    }

    if means[0] > means[1] {
        means.swap(0, 1);
        vars.swap(0, 1);
        weights.swap(0, 1);
    }
    Ok(GmmFit {
        means,
        variances: vars,
        weights,
        iterations,
        log_likelihoods: trace,
    })
}

/// Posterior probability that `loss` came from the low-mean component,
/// clamped to [0, 1]. With identical components this degenerates to the
/// clean component's weight for any loss.
pub fn clean_probability(fit: &GmmFit, loss: f64) -> f64 {
    assert!(loss.is_finite(), "clean_probability of non-finite loss");
    let l0 = fit.weights[0].max(f64::MIN_POSITIVE).ln() + log_normal_pdf(loss, fit.means[0], fit.variances[0]);
    let l1 = fit.weights[1].max(f64::MIN_POSITIVE).ln() + log_normal_pdf(loss, fit.means[1], fit.variances[1]);
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    (e0 / (e0 + e1)).clamp(0.0, 1.0)
}

/// The five subsets one selection epoch produces. Sets hold sample ids;
/// `clean` and `purified` partition `consistency`, `hard` is the
/// high-`o` part of `discrepancy`.
#[derive(Debug, Clone)]
pub struct PartitionResult {
    pub consistency: BTreeSet<usize>,
    pub discrepancy: BTreeSet<usize>,
    pub clean: BTreeSet<usize>,
    pub purified: BTreeSet<usize>,
    pub hard: BTreeSet<usize>,
    pub phi: f64,
}

/// Splits samples by threshold exceedance (strictly greater) and clean
/// probability. All three maps must cover exactly the same ids.
pub fn partition(
    conf_strong: &BTreeMap<usize, f64>,
    conf_weak: &BTreeMap<usize, f64>,
    state: &ThresholdState,
    clean_prob: &BTreeMap<usize, f64>,
    phi: f64,
) -> Result<PartitionResult, SelectionError> {
    if !(phi.is_finite() && (0.0..=1.0).contains(&phi)) {
        return Err(SelectionError::BadPhi(phi));
    }
    for (&id, map, what) in conf_weak
        .keys()
        .map(|id| (id, conf_strong, "strong confidence"))
        .chain(clean_prob.keys().map(|id| (id, conf_strong, "strong confidence")))
    {
        if !map.contains_key(&id) {
            return Err(SelectionError::InconsistentIds(format!(
                "sample {id} has no {what}"
            )));
        }
    }

    let mut out = PartitionResult {
        consistency: BTreeSet::new(),
        discrepancy: BTreeSet::new(),
        clean: BTreeSet::new(),
        purified: BTreeSet::new(),
        hard: BTreeSet::new(),
        phi,
    };
    for (&id, &cs) in conf_strong {
        let cw = *conf_weak
            .get(&id)
            .ok_or(SelectionError::MissingEntry { id, what: "weak confidence" })?;
        let o = *clean_prob
            .get(&id)
            .ok_or(SelectionError::MissingEntry { id, what: "clean probability" })?;
        for (kind, value) in [(LearnerKind::Strong, cs), (LearnerKind::Weak, cw)] {
            if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
                return Err(SelectionError::BadConfidence { id, kind, value });
            }
        }
        let in_strong = cs > state.tau(id, LearnerKind::Strong);
        let in_weak = cw > state.tau(id, LearnerKind::Weak);
        match (in_strong, in_weak) {
            (true, true) => {
                out.consistency.insert(id);
                if o >= phi {
                    out.clean.insert(id);
                } else {
                    out.purified.insert(id);
                }
            }
            (true, false) | (false, true) => {
                out.discrepancy.insert(id);
                if o >= phi {
                    out.hard.insert(id);
                }
            }
            (false, false) => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn threshold_starts_at_zero_and_follows_ema() {
        let mut st = ThresholdState::new(0.96, 0.5).unwrap();
        assert_eq!(st.tau(3, LearnerKind::Strong), 0.0);
        // First update: tau = lambda * p.
        let t1 = st.update(3, LearnerKind::Weak, 0.8).unwrap();
        assert!((t1 - 0.4).abs() < 1e-12);
        let t2 = st.update(3, LearnerKind::Weak, 0.4).unwrap();
        assert!((t2 - (0.5 * 0.4 + 0.5 * 0.4)).abs() < 1e-12);
        // Other keys are untouched.
        assert_eq!(st.tau(3, LearnerKind::Strong), 0.0);
        assert_eq!(st.tau(4, LearnerKind::Weak), 0.0);
    }

    #[test]
    fn threshold_converges_to_constant_confidence() {
        let mut st = ThresholdState::new(0.3, 0.3).unwrap();
        for _ in 0..200 {
            st.update(0, LearnerKind::Strong, 0.75).unwrap();
        }
        assert!((st.tau(0, LearnerKind::Strong) - 0.75).abs() < 1e-9);
    }

    #[test]
    fn threshold_validates_inputs() {
        assert!(ThresholdState::new(1.2, 0.5).is_err());
        assert!(ThresholdState::new(0.5, -0.1).is_err());
        let mut st = ThresholdState::new(0.5, 0.5).unwrap();
        assert!(st.update(0, LearnerKind::Strong, 1.5).is_err());
        assert!(st.update(0, LearnerKind::Strong, f64::NAN).is_err());
    }

    fn planted(seed: u64) -> Vec<f64> {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::seeds::rng(seed, "gmm-test");
        let lo = Normal::new(0.1, 0.05).unwrap();
        let hi = Normal::new(2.0, 0.4).unwrap();
        let mut xs: Vec<f64> = (0..300).map(|_| lo.sample(&mut rng)).collect();
        xs.extend((0..300).map(|_| hi.sample(&mut rng)));
        xs
    }

    #[test]
    fn gmm_recovers_planted_components() {
        let xs = planted(5);
        let fit = fit_loss_gmm(&xs).unwrap();
        assert!((fit.means[0] - 0.1).abs() < 0.05, "clean mean {}", fit.means[0]);
        assert!((fit.means[1] - 2.0).abs() < 0.2, "noisy mean {}", fit.means[1]);
        assert!((fit.weights[0] - 0.5).abs() < 0.05);
        assert!(fit.means[0] <= fit.means[1]);
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood dipped: {:?}", w);
        }
    }

    #[test]
    fn gmm_rejects_degenerate_inputs() {
        assert!(matches!(fit_loss_gmm(&[1.0, 2.0, 3.0]), Err(SelectionError::TooFewSamples(3))));
        assert!(matches!(
            fit_loss_gmm(&[0.7; 64]),
            Err(SelectionError::DegenerateLosses(_))
        ));
        assert!(matches!(
            fit_loss_gmm(&[1.0, f64::NAN, 2.0, 3.0]),
            Err(SelectionError::NonFiniteLoss(1))
        ));
    }

    #[test]
    fn clean_probability_orders_by_loss() {
        let fit = fit_loss_gmm(&planted(6)).unwrap();
        let low = clean_probability(&fit, 0.1);
        let high = clean_probability(&fit, 2.0);
        assert!(low > 0.95, "low-loss sample got {low}");
        assert!(high < 0.05, "high-loss sample got {high}");
    }

    #[test]
    fn clean_probability_of_identical_components_is_the_weight() {
        let fit = GmmFit {
            means: [1.0, 1.0],
            variances: [0.25, 0.25],
            weights: [0.3, 0.7],
            iterations: 0,
            log_likelihoods: vec![],
        };
        for loss in [-5.0, 0.0, 1.0, 42.0] {
            assert!((clean_probability(&fit, loss) - 0.3).abs() < 1e-12);
        }
    }

    /// Plants exact thresholds by using lambda = 1 so tau equals the last
    /// update.
    fn state_with(taus: &[(usize, LearnerKind, f64)]) -> ThresholdState {
        let mut st = ThresholdState::new(1.0, 1.0).unwrap();
        for &(id, kind, tau) in taus {
            st.update(id, kind, tau).unwrap();
        }
        st
    }

    #[test]
    fn partition_truth_table() {
        // Eight cases: strong gate x weak gate x (o >= phi).
        let phi = 0.5;
        let st = state_with(&(0..8).flat_map(|id| {
            [(id, LearnerKind::Strong, 0.5), (id, LearnerKind::Weak, 0.5)]
        }).collect::<Vec<_>>());
        let mut cs = BTreeMap::new();
        let mut cw = BTreeMap::new();
        let mut o = BTreeMap::new();
        for id in 0..8usize {
            let strong_in = id & 0b100 != 0;
            let weak_in = id & 0b010 != 0;
            let o_high = id & 0b001 != 0;
            cs.insert(id, if strong_in { 0.9 } else { 0.1 });
            cw.insert(id, if weak_in { 0.9 } else { 0.1 });
            o.insert(id, if o_high { 0.8 } else { 0.2 });
        }
        let part = partition(&cs, &cw, &st, &o, phi).unwrap();
        assert_eq!(part.consistency, BTreeSet::from([6, 7]));
        assert_eq!(part.clean, BTreeSet::from([7]));
        assert_eq!(part.purified, BTreeSet::from([6]));
        assert_eq!(part.discrepancy, BTreeSet::from([2, 3, 4, 5]));
        assert_eq!(part.hard, BTreeSet::from([3, 5]));
    }

    #[test]
    fn boundaries_are_strict_for_tau_and_inclusive_for_phi() {
        let st = state_with(&[
            (0, LearnerKind::Strong, 0.6),
            (0, LearnerKind::Weak, 0.6),
            (1, LearnerKind::Strong, 0.5),
            (1, LearnerKind::Weak, 0.5),
        ]);
        let cs = BTreeMap::from([(0, 0.6), (1, 0.9)]);
        let cw = BTreeMap::from([(0, 0.6), (1, 0.9)]);
        let o = BTreeMap::from([(0, 0.4), (1, 0.4)]);
        // Sample 0 sits exactly on tau: excluded from C entirely.
        // Sample 1 has o exactly phi: clean, not purified.
        let part = partition(&cs, &cw, &st, &o, 0.4).unwrap();
        assert!(!part.consistency.contains(&0) && !part.discrepancy.contains(&0));
        assert!(part.clean.contains(&1));
        assert!(!part.purified.contains(&1));
    }

    #[test]
    fn partition_reports_missing_ids() {
        let st = state_with(&[]);
        let cs = BTreeMap::from([(7, 0.9)]);
        let o = BTreeMap::from([(7, 0.9)]);
        let err = partition(&cs, &BTreeMap::new(), &st, &o, 0.5).unwrap_err();
        assert!(matches!(err, SelectionError::MissingEntry { id: 7, .. }));
        let cw_extra = BTreeMap::from([(7, 0.9), (8, 0.9)]);
        let err = partition(&cs, &cw_extra, &st, &o, 0.5).unwrap_err();
        assert!(matches!(err, SelectionError::InconsistentIds(_)));
    }

    proptest! {
        #[test]
        fn partition_algebra_holds(seed in 0u64..500) {
            let mut rng = crate::seeds::rng(seed, "partition-prop");
            let n = rng.random_range(1usize..60);
            let mut st = ThresholdState::new(1.0, 1.0).unwrap();
            let mut cs = BTreeMap::new();
            let mut cw = BTreeMap::new();
            let mut o = BTreeMap::new();
            for id in 0..n {
                st.update(id, LearnerKind::Strong, rng.random()).unwrap();
                st.update(id, LearnerKind::Weak, rng.random()).unwrap();
                cs.insert(id, rng.random());
                cw.insert(id, rng.random());
                o.insert(id, rng.random());
            }
            let phi: f64 = rng.random();
            let p = partition(&cs, &cw, &st, &o, phi).unwrap();
            prop_assert!(p.consistency.is_disjoint(&p.discrepancy));
            let mut c_rebuilt = p.clean.clone();
            c_rebuilt.extend(&p.purified);
            prop_assert_eq!(&c_rebuilt, &p.consistency);
            prop_assert!(p.clean.is_disjoint(&p.purified));
            prop_assert!(p.hard.is_subset(&p.discrepancy));
            prop_assert!(p.clean.union(&p.purified).all(|id| !p.hard.contains(id)));
        }
    }
}
