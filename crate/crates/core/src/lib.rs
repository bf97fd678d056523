//! Collaborative sample selection for learning from noisy labels.
//!
//! Two learners of different capacity (a small MLP and an affine model on a
//! reduced feature view) are trained side by side. Each epoch their
//! confidences are compared against per-sample dynamic thresholds and a
//! two-component Gaussian mixture over the strong learner's losses, which
//! splits the training set into a clean subset, a purified subset that is
//! relabeled by an annotation oracle, and a hard subset trained with
//! embedding mixup. Everything is seeded and deterministic.

pub mod annotator;
pub mod cli;
pub mod data;
pub mod learner;
pub mod losses;
pub mod noise;
pub mod pipeline;
pub mod seeds;
pub mod selection;
pub mod synth;
