//! Shared fixtures for the criterion benches.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovor_core::align_mlp::TrainSample;
use ovor_core::prompts::CategoryTable;
use ovor_core::synthetic::{training_task, TrainingTaskSpec};
use ovor_core::LabelMask;

/// Uniform entries in [-1, 1).
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Rows scaled to unit length.
pub fn unit_rows(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut m = random_matrix(rows, cols, seed);
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    m
}

/// `blocks x blocks` label tiles with a sprinkle of noise pixels.
pub fn blocky_mask(size: usize, blocks: usize, labels: u32, seed: u64) -> LabelMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tile = size.div_ceil(blocks);
    let coarse: Vec<u32> = (0..blocks * blocks).map(|_| rng.random_range(0..=labels)).collect();
    let data = (0..size * size)
        .map(|i| {
            let (r, c) = (i / size, i % size);
            if rng.random_bool(0.02) {
                rng.random_range(0..=labels)
            } else {
                coarse[(r / tile) * blocks + c / tile]
            }
        })
        .collect();
    LabelMask::new(size, size, data).expect("square mask")
}

pub fn training_fixture() -> (Vec<TrainSample>, CategoryTable) {
    training_task(&TrainingTaskSpec::default()).expect("default training task")
}
