//! Synthetic embedding datasets for demos and benchmarks: Gaussian blobs,
//! one per class.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::data::{DataError, LabeledDataset, Sample};
use crate::seeds;

/// Isotropic Gaussian blob specification. Class `k` draws around
/// `centers[k]` with per-coordinate standard deviation `sigma`; counts are
/// split as evenly as possible (earlier classes absorb the remainder) and
/// the sample order is shuffled.
#[derive(Debug, Clone)]
pub struct BlobSpec {
    pub n: usize,
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub seed: u64,
}

pub fn generate_blobs(spec: &BlobSpec) -> Result<LabeledDataset, DataError> {
    let k = spec.centers.len();
    if k < 2 {
        return Err(DataError::BadDataset(format!("{k} blob centers, need at least 2")));
    }
    let dim = spec.centers[0].len();
    if dim == 0 || spec.centers.iter().any(|c| c.len() != dim) {
        return Err(DataError::BadDataset("blob centers must share a positive width".into()));
    }
    if spec.n < k {
        return Err(DataError::BadDataset(format!("{} samples for {k} classes", spec.n)));
    }
    if !(spec.sigma.is_finite() && spec.sigma > 0.0) {
        return Err(DataError::BadDataset(format!("sigma = {}, need > 0", spec.sigma)));
    }

    let mut rng = seeds::rng(spec.seed, "blobs");
    let normal = Normal::new(0.0, spec.sigma).expect("positive sigma");
    let base = spec.n / k;
    let extra = spec.n % k;
    let mut samples = Vec::with_capacity(spec.n);
    for (class, center) in spec.centers.iter().enumerate() {
        let count = base + usize::from(class < extra);
        for _ in 0..count {
            let features = center.iter().map(|c| c + normal.sample(&mut rng)).collect();
            samples.push(Sample {
                id: samples.len(),
                text: None,
                features,
                label: class,
                true_label: None,
            });
        }
    }
    samples.shuffle(&mut rng);
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = i;
    }
    LabeledDataset::new(samples, k, None)
}
