//! Synthetic inputs shared by the benchmarks.

use ndarray::Array2;
use nnk_core::{FeatureSnapshot, LabelSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two Gaussian-ish blobs per channel, label = blob.
pub fn blob_snapshot(n: usize, channels: usize, dim: usize, seed: u64) -> FeatureSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u16> = (0..n).map(|i| (i % 2) as u16).collect();
    let chans = (0..channels)
        .map(|_| {
            Array2::from_shape_fn((n, dim), |(i, _)| {
                let centre = if labels[i] == 0 { 0.0 } else { 3.0 };
                centre + rng.gen_range(-1.0f32..1.0)
            })
        })
        .collect();
    FeatureSnapshot::new(0, LabelSet::new(labels, 2).expect("binary labels"), chans).expect("valid snapshot")
}

pub fn random_features(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0))
}
