//! Shared fixtures for the criterion benchmarks.

use composer_core::pipeline::{toy_pipeline, LatentDims};
use composer_core::reinit::initial_noise;
use composer_core::rng::{normal_tensor, stream};
use composer_core::{Pipeline, Tensor};

/// The two-concept toy job at the default 8x16x16 latent.
pub fn toy_job(seed: u64) -> (Pipeline, Tensor) {
    let p = toy_pipeline(seed, LatentDims::default()).expect("toy pipeline");
    let z = initial_noise(seed, p.latent_shape());
    (p, z)
}

pub fn random_map(seed: u64, h: usize, w: usize) -> Tensor {
    normal_tensor(&mut stream(seed, "bench/map"), &[h, w], 1.0)
}
