//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slnet_core::Point;

/// `n` points uniform in the unit cube, fixed by `seed`.
pub fn cloud(n: usize, seed: u64) -> Vec<Point<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}
