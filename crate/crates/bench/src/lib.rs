//! Deterministic inputs shared by the benchmarks.

use ndarray::{Array2, Array4};
use omniseg_core::dynamic_mapping::{partition_head_params, DynamicHeadParams, HEAD_PARAM_COUNT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn features(n: usize, c: usize, side: usize, seed: u64) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((n, c, side, side), || rng.random_range(-1.0..1.0))
}

pub fn head(seed: u64) -> DynamicHeadParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega: Vec<f32> = (0..HEAD_PARAM_COUNT).map(|_| rng.random_range(-0.5..0.5)).collect();
    partition_head_params(&omega).expect("162 values")
}

/// A filled disc and a shifted copy, the typical shape of a metric input.
pub fn mask_pair(side: usize) -> (Array2<u8>, Array2<u8>) {
    let disc = |cy: f64, cx: f64| {
        Array2::from_shape_fn((side, side), |(y, x)| {
            let r = side as f64 / 4.0;
            (((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) <= r * r) as u8
        })
    };
    let c = side as f64 / 2.0;
    (disc(c, c), disc(c + 3.0, c - 2.0))
}
