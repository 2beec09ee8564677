//! Shared fixtures for the benchmarks.

use rcs_core::data::synthetic_image;
use rcs_core::{CacheMode, Rng, Tensor, TrainConfig};

/// A compact estimator on `size×size` patches.
pub fn config(size: usize, steps: usize, mode: CacheMode) -> TrainConfig {
    TrainConfig {
        patch: size,
        steps,
        channels: [8, 16],
        expansion: 2,
        blocks_per_group: 1,
        framework_mode: mode,
        ..Default::default()
    }
}

pub fn image(size: usize) -> Tensor<f32> {
    synthetic_image(&mut Rng::new(11), size)
}
