//! Shared fixtures for the benchmarks.

use fusereid_core::config::TrainConfig;
use fusereid_core::model::init_student;
use fusereid_core::ModelState;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rows of standard-uniform noise in `[-1, 1)`.
pub fn features(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, dim), || r.random_range(-1.0..1.0))
}

/// A batch of images sized for `cfg`'s encoder.
pub fn images(cfg: &TrainConfig, batch: usize, seed: u64) -> Array4<f64> {
    let enc = &cfg.model.encoder;
    let mut r = rng(seed);
    Array4::from_shape_simple_fn((batch, 3, enc.input_height, enc.input_width), || r.random_range(0.0..1.0))
}

/// Freshly initialized student with a classifier over `classes` labels.
pub fn student(cfg: &TrainConfig, classes: usize) -> ModelState {
    init_student(&cfg.model.encoder, cfg.model.parts, classes, &mut rng(7)).expect("desk config is valid")
}

/// `P x K` labels in batch order: `0,0,..,1,1,..`.
pub fn pk_labels(ids: usize, per_id: usize) -> Vec<usize> {
    (0..ids * per_id).map(|i| i / per_id).collect()
}
