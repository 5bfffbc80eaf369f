//! Fixtures shared by the criterion benches.

use hyperada::autodiff::Tensor;
use hyperada::ball::{self, BallConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded `rows x cols` matrix with entries uniform in `(-scale, scale)`.
pub fn fixture_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("fixture shape")
}

/// Seeded ball points, images of tangent vectors uniform in `(-1, 1)^dim`.
pub fn fixture_points(n: usize, cfg: &BallConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            ball::exp_origin(&v, cfg).expect("finite tangent vector")
        })
        .collect()
}
