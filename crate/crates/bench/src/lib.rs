//! Fixtures shared by the benchmarks.

use hsic_core::classify::{EstimatedCenters, FeatureMap};
use hsic_core::data::{Role, SplitMask};
use hsic_core::nncore::{init_network, Network};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full-size network for `bands` inputs and `classes` outputs.
pub fn network(bands: usize, classes: usize) -> Network {
    init_network(&[bands, 512, 256, 32, classes], 0)
        .unwrap()
        .with_dropout(0.3)
        .unwrap()
}

pub fn inputs(rows: usize, bands: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, bands), || rng.random_range(-2.0..2.0))
}

pub fn labels(rows: usize, classes: usize) -> Vec<usize> {
    (0..rows).map(|i| 1 + i % classes).collect()
}

/// Random feature map, about 5% Train pixels, and random centers.
pub fn scene(side: usize, dim: usize, classes: usize, seed: u64) -> (FeatureMap, SplitMask, EstimatedCenters) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..side * side * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fm = FeatureMap::new(side, side, dim, values).unwrap();
    let roles = (0..side * side)
        .map(|_| if rng.random_bool(0.05) { Role::Train } else { Role::Test })
        .collect();
    let mask = SplitMask::new(side, side, roles).unwrap();
    let centers = Array2::from_shape_simple_fn((classes, dim), || rng.random_range(-1.0..1.0));
    (fm, mask, EstimatedCenters::new(centers).unwrap())
}
