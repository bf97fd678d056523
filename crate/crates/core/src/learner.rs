//! The two co-prediction learners.
//!
//! The strong learner is a one-hidden-layer tanh MLP over the full feature
//! vector; the weak learner is an affine map over a reduced view (the first
//! `view_dim` coordinates, half the width by default). Both expose the same
//! training surface: softmax probabilities, per-sample cross-entropy, one
//! full-gradient step on a weighted soft-target batch, and low-level
//! gradient hooks the subset losses build on.
//!
//! Parameters live in one flat `Vec<f64>` (strong: `w1` row-major, `b1`,
//! `w2` row-major, `b2`; weak: `w` row-major, `b`), which keeps checkpoints,
//! gradient buffers and finite-difference probes trivial.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ProbabilityVector, Sample};
use crate::seeds;

/// Probabilities below this floor are clamped before taking logarithms.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum LearnerError {
    #[error("{kind:?} learner: expected {expected} features, got {got}")]
    WrongWidth {
        kind: LearnerKind,
        expected: usize,
        got: usize,
    },
    #[error("{kind:?} learner: {what} became non-finite ({detail})")]
    NonFinite {
        kind: LearnerKind,
        what: &'static str,
        detail: String,
    },
    #[error("{0:?} learner has no embedding layer")]
    NoEmbedding(LearnerKind),
    #[error("batch item {index}: {msg}")]
    BadBatchItem { index: usize, msg: String },
    #[error("checkpoint {path}: {msg}")]
    BadCheckpoint { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid learner shape: {0}")]
    BadShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Strong,
    Weak,
}

/// One element of a training batch: features, a soft target distribution and
/// a non-negative weight. The batch objective is
/// `sum_i weight_i * CE(target_i, probs_i)`.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub features: &'a [f64],
    pub target: &'a ProbabilityVector,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: ProbabilityVector,
    /// Largest class probability.
    pub confidence: f64,
    /// Argmax class, ties to the smallest index.
    pub predicted: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    kind: LearnerKind,
    input_dim: usize,
    view_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    seed: u64,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Learner {
    kind: LearnerKind,
    input_dim: usize,
    view_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    seed: u64,
    params: Vec<f64>,
}

/// Forward-pass activations; `hidden` is empty for the weak learner.
#[derive(Debug, Clone)]
pub struct Activation {
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Learner {
    /// One-hidden-layer tanh MLP on the full feature vector. Weights draw
    /// from N(0, 1/fan_in); biases start at zero.
    pub fn strong(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        check_shape(input_dim, num_classes)?;
        if hidden_dim == 0 {
            return Err(LearnerError::BadShape("hidden_dim must be positive".into()));
        }
        let mut l = Self {
            kind: LearnerKind::Strong,
            input_dim,
            view_dim: input_dim,
            hidden_dim,
            num_classes,
            seed,
            params: vec![0.0; hidden_dim * input_dim + hidden_dim + num_classes * hidden_dim + num_classes],
        };
        l.init_weights();
        Ok(l)
    }

    /// Affine map on the first `view_dim` coordinates (default: half the
    /// input width, at least one coordinate).
    pub fn weak(
        input_dim: usize,
        view_dim: Option<usize>,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        check_shape(input_dim, num_classes)?;
        let view_dim = view_dim.unwrap_or_else(|| (input_dim / 2).max(1));
        if view_dim == 0 || view_dim > input_dim {
            return Err(LearnerError::BadShape(format!(
                "view_dim {view_dim} outside 1..={input_dim}"
            )));
        }
        let mut l = Self {
            kind: LearnerKind::Weak,
            input_dim,
            view_dim,
            hidden_dim: 0,
            num_classes,
            seed,
            params: vec![0.0; num_classes * view_dim + num_classes],
        };
        l.init_weights();
        Ok(l)
    }

    fn init_weights(&mut self) {
        let mut rng = seeds::rng(self.seed, "learner-init");
        match self.kind {
            LearnerKind::Strong => {
                let d = self.input_dim;
                let h = self.hidden_dim;
                let k = self.num_classes;
                let n1 = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
                for p in &mut self.params[..h * d] {
                    *p = n1.sample(&mut rng);
                }
                let n2 = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("positive std");
                let w2 = h * d + h;
                for p in &mut self.params[w2..w2 + k * h] {
                    *p = n2.sample(&mut rng);
                }
            }
            LearnerKind::Weak => {
                let v = self.view_dim;
                let k = self.num_classes;
                let n = Normal::new(0.0, 1.0 / (v as f64).sqrt()).expect("positive std");
                for p in &mut self.params[..k * v] {
                    *p = n.sample(&mut rng);
                }
            }
        }
    }

    pub fn kind(&self) -> LearnerKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn view_dim(&self) -> usize {
        self.view_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the flat parameter vector, used by finite-difference
    /// probes and tests; training should go through gradients instead.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_width(&self, features: &[f64]) -> Result<(), LearnerError> {
        if features.len() != self.input_dim {
            return Err(LearnerError::WrongWidth {
                kind: self.kind,
                expected: self.input_dim,
                got: features.len(),
            });
        }
        Ok(())
    }

    /// Hidden activations and class probabilities at `features`.
    pub fn activate(&self, features: &[f64]) -> Result<Activation, LearnerError> {
        self.check_width(features)?;
        let k = self.num_classes;
        let mut logits = vec![0.0; k];
        let hidden = match self.kind {
            LearnerKind::Strong => {
                let (d, h) = (self.input_dim, self.hidden_dim);
                let mut hid = vec![0.0; h];
                for j in 0..h {
                    let row = &self.params[j * d..(j + 1) * d];
                    let pre: f64 =
                        row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + self.params[h * d + j];
                    hid[j] = pre.tanh();
                }
                let w2 = h * d + h;
                let b2 = w2 + k * h;
                for c in 0..k {
                    let row = &self.params[w2 + c * h..w2 + (c + 1) * h];
                    logits[c] =
                        row.iter().zip(&hid).map(|(w, a)| w * a).sum::<f64>() + self.params[b2 + c];
                }
                hid
            }
            LearnerKind::Weak => {
                let v = self.view_dim;
                let view = &features[..v];
                for c in 0..k {
                    let row = &self.params[c * v..(c + 1) * v];
                    logits[c] =
                        row.iter().zip(view).map(|(w, x)| w * x).sum::<f64>() + self.params[k * v + c];
                }
                Vec::new()
            }
        };
        let probs = self.softmax(&logits)?;
        Ok(Activation { hidden, probs })
    }

    fn softmax(&self, logits: &[f64]) -> Result<Vec<f64>, LearnerError> {
        let mut m = f64::NEG_INFINITY;
        for &z in logits {
            if !z.is_finite() {
                return Err(LearnerError::NonFinite {
                    kind: self.kind,
                    what: "logits",
                    detail: format!("{logits:?}"),
                });
            }
            m = m.max(z);
        }
        let mut p: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let sum: f64 = p.iter().sum();
        for v in &mut p {
            *v /= sum;
        }
        Ok(p)
    }

    /// Class probabilities at `features`.
    pub fn probs(&self, features: &[f64]) -> Result<ProbabilityVector, LearnerError> {
        let act = self.activate(features)?;
        Ok(ProbabilityVector::new(act.probs).expect("softmax output is a distribution"))
    }

    /// Probabilities plus the confidence (largest probability) for a sample.
    pub fn predict_confidence(&self, sample: &Sample) -> Result<Prediction, LearnerError> {
        let probs = self.probs(&sample.features)?;
        let predicted = probs.argmax();
        Ok(Prediction {
            confidence: probs.get(predicted),
            predicted,
            probs,
        })
    }

    /// Cross-entropy of the observed label: `-ln max(p(label), floor)`.
    pub fn per_sample_loss(&self, sample: &Sample) -> Result<f64, LearnerError> {
        let probs = self.probs(&sample.features)?;
        Ok(-probs.get(sample.label).max(PROBABILITY_FLOOR).ln())
    }

    /// Embedding of a sample: the hidden activations. Only the strong
    /// learner has an embedding layer.
    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>, LearnerError> {
        if self.kind != LearnerKind::Strong {
            return Err(LearnerError::NoEmbedding(self.kind));
        }
        Ok(self.activate(features)?.hidden)
    }

    /// Classifier-head probabilities for an embedding-space vector, without
    /// re-encoding through the hidden layer. Strong learner only.
    pub fn head_probs(&self, embedding: &[f64]) -> Result<Vec<f64>, LearnerError> {
        if self.kind != LearnerKind::Strong {
            return Err(LearnerError::NoEmbedding(self.kind));
        }
        let (d, h, k) = (self.input_dim, self.hidden_dim, self.num_classes);
        if embedding.len() != h {
            return Err(LearnerError::WrongWidth {
                kind: self.kind,
                expected: h,
                got: embedding.len(),
            });
        }
        let w2 = h * d + h;
        let b2 = w2 + k * h;
        let mut logits = vec![0.0; k];
        for c in 0..k {
            let row = &self.params[w2 + c * h..w2 + (c + 1) * h];
            logits[c] =
                row.iter().zip(embedding).map(|(w, a)| w * a).sum::<f64>() + self.params[b2 + c];
        }
        self.softmax(&logits)
    }

    /// A zeroed gradient buffer matching the flat parameter layout.
    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Backpropagates a loss gradient with respect to the logits at
    /// `features` into `grad`.
    pub fn accumulate_logit_grad(
        &self,
        features: &[f64],
        dlogits: &[f64],
        grad: &mut [f64],
    ) -> Result<(), LearnerError> {
        self.check_width(features)?;
        debug_assert_eq!(dlogits.len(), self.num_classes);
        debug_assert_eq!(grad.len(), self.params.len());
        match self.kind {
            LearnerKind::Strong => {
                let hidden = self.activate(features)?.hidden;
                let dembed = self.head_grad_into(&hidden, dlogits, grad);
                self.embed_grad_into(features, &hidden, &dembed, grad);
            }
            LearnerKind::Weak => {
                let (v, k) = (self.view_dim, self.num_classes);
                let view = &features[..v];
                for c in 0..k {
                    let dz = dlogits[c];
                    let row = &mut grad[c * v..(c + 1) * v];
                    for (g, x) in row.iter_mut().zip(view) {
                        *g += dz * x;
                    }
                    grad[k * v + c] += dz;
                }
            }
        }
        Ok(())
    }

    /// Backpropagates a logit gradient through the classifier head at an
    /// embedding-space point; returns the gradient with respect to the
    /// embedding. Strong learner only.
    pub fn accumulate_head_grad(
        &self,
        embedding: &[f64],
        dlogits: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>, LearnerError> {
        if self.kind != LearnerKind::Strong {
            return Err(LearnerError::NoEmbedding(self.kind));
        }
        if embedding.len() != self.hidden_dim {
            return Err(LearnerError::WrongWidth {
                kind: self.kind,
                expected: self.hidden_dim,
                got: embedding.len(),
            });
        }
        Ok(self.head_grad_into(embedding, dlogits, grad))
    }

    /// Backpropagates an embedding gradient through the hidden layer at
    /// `features` (with its activations) into `grad`. Strong learner only.
    pub fn accumulate_embed_grad(
        &self,
        features: &[f64],
        hidden: &[f64],
        dembed: &[f64],
        grad: &mut [f64],
    ) -> Result<(), LearnerError> {
        if self.kind != LearnerKind::Strong {
            return Err(LearnerError::NoEmbedding(self.kind));
        }
        self.check_width(features)?;
        self.embed_grad_into(features, hidden, dembed, grad);
        Ok(())
    }

    fn head_grad_into(&self, embedding: &[f64], dlogits: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (d, h, k) = (self.input_dim, self.hidden_dim, self.num_classes);
        let w2 = h * d + h;
        let b2 = w2 + k * h;
        let mut dembed = vec![0.0; h];
        for c in 0..k {
            let dz = dlogits[c];
            let wrow = &self.params[w2 + c * h..w2 + (c + 1) * h];
            let grow = &mut grad[w2 + c * h..w2 + (c + 1) * h];
            for j in 0..h {
                grow[j] += dz * embedding[j];
                dembed[j] += dz * wrow[j];
            }
            grad[b2 + c] += dz;
        }
        dembed
    }

    fn embed_grad_into(&self, features: &[f64], hidden: &[f64], dembed: &[f64], grad: &mut [f64]) {
        let (d, h) = (self.input_dim, self.hidden_dim);
        for j in 0..h {
            let dpre = dembed[j] * (1.0 - hidden[j] * hidden[j]);
            if dpre == 0.0 {
                continue;
            }
            let row = &mut grad[j * d..(j + 1) * d];
            for (g, x) in row.iter_mut().zip(features) {
                *g += dpre * x;
            }
            grad[h * d + j] += dpre;
        }
    }

    /// Descends along `grad` scaled by `lr`. Fails on non-finite updates.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) -> Result<(), LearnerError> {
        debug_assert_eq!(grad.len(), self.params.len());
        for (i, (p, g)) in self.params.iter_mut().zip(grad).enumerate() {
            let next = *p - lr * g;
            if !next.is_finite() {
                return Err(LearnerError::NonFinite {
                    kind: self.kind,
                    what: "parameter update",
                    detail: format!("param {i}: {p} - {lr} * {g}"),
                });
            }
            *p = next;
        }
        Ok(())
    }

    /// One full-gradient step on the weighted soft-target batch objective
    /// `sum_i w_i * CE(target_i, probs_i)`. Returns the pre-step loss.
    pub fn train_step(&mut self, batch: &[TrainItem<'_>], lr: f64) -> Result<f64, LearnerError> {
        let mut grad = self.zero_grad();
        let mut loss = 0.0;
        let k = self.num_classes;
        let mut dlogits = vec![0.0; k];
        for (index, item) in batch.iter().enumerate() {
            if item.target.len() != k {
                return Err(LearnerError::BadBatchItem {
                    index,
                    msg: format!("target has {} classes, learner has {k}", item.target.len()),
                });
            }
            if !(item.weight.is_finite() && item.weight >= 0.0) {
                return Err(LearnerError::BadBatchItem {
                    index,
                    msg: format!("weight {} not finite and non-negative", item.weight),
                });
            }
            let act = self.activate(item.features)?;
            for c in 0..k {
                let q = item.target.get(c);
                if q > 0.0 {
                    loss -= item.weight * q * act.probs[c].max(PROBABILITY_FLOOR).ln();
                }
                dlogits[c] = item.weight * (act.probs[c] - q);
            }
            match self.kind {
                LearnerKind::Strong => {
                    let dembed = self.head_grad_into(&act.hidden, &dlogits, &mut grad);
                    self.embed_grad_into(item.features, &act.hidden, &dembed, &mut grad);
                }
                LearnerKind::Weak => {
                    self.accumulate_logit_grad(item.features, &dlogits, &mut grad)?;
                }
            }
        }
        if !loss.is_finite() {
            return Err(LearnerError::NonFinite {
                kind: self.kind,
                what: "batch loss",
                detail: format!("{loss}"),
            });
        }
        self.apply_gradient(&grad, lr)?;
        Ok(loss)
    }

    /// Writes a JSON checkpoint: a `{kind, dims, seed}` header plus the flat
    /// parameter array. Round-trips exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), LearnerError> {
        let ckpt = Checkpoint {
            kind: self.kind,
            input_dim: self.input_dim,
            view_dim: self.view_dim,
            hidden_dim: self.hidden_dim,
            num_classes: self.num_classes,
            seed: self.seed,
            params: self.params.clone(),
        };
        let file = File::create(path).map_err(|source| LearnerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::to_writer(BufWriter::new(file), &ckpt).map_err(|e| LearnerError::BadCheckpoint {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, LearnerError> {
        let file = File::open(path).map_err(|source| LearnerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt: Checkpoint =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| LearnerError::BadCheckpoint {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
        let expected = match ckpt.kind {
            LearnerKind::Strong => {
                ckpt.hidden_dim * ckpt.input_dim
                    + ckpt.hidden_dim
                    + ckpt.num_classes * ckpt.hidden_dim
                    + ckpt.num_classes
            }
            LearnerKind::Weak => ckpt.num_classes * ckpt.view_dim + ckpt.num_classes,
        };
        if ckpt.params.len() != expected {
            return Err(LearnerError::BadCheckpoint {
                path: path.display().to_string(),
                msg: format!("{} parameters, header implies {expected}", ckpt.params.len()),
            });
        }
        if ckpt.params.iter().any(|p| !p.is_finite()) {
            return Err(LearnerError::BadCheckpoint {
                path: path.display().to_string(),
                msg: "non-finite parameter".into(),
            });
        }
        Ok(Self {
            kind: ckpt.kind,
            input_dim: ckpt.input_dim,
            view_dim: ckpt.view_dim,
            hidden_dim: ckpt.hidden_dim,
            num_classes: ckpt.num_classes,
            seed: ckpt.seed,
            params: ckpt.params,
        })
    }
}

fn check_shape(input_dim: usize, num_classes: usize) -> Result<(), LearnerError> {
    if input_dim == 0 {
        return Err(LearnerError::BadShape("input_dim must be positive".into()));
    }
    if num_classes < 2 {
        return Err(LearnerError::BadShape(format!(
            "num_classes = {num_classes}, need at least 2"
        )));
    }
    Ok(())
}
