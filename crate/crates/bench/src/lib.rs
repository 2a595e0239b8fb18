//! Shared inputs for the kernel benchmarks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform(-1, 1) matrix from a fixed seed.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Responses that are a noisy linear map of `x`.
pub fn linear_responses(x: &DMatrix<f64>, channels: usize, seed: u64) -> DMatrix<f64> {
    let w = random_matrix(x.ncols(), channels, seed);
    x * w + random_matrix(x.nrows(), channels, seed + 1)
}
