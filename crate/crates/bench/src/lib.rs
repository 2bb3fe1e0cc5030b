//! Deterministic fixtures shared by the benchmarks.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use longitrack_core::net::FeatureMap;

pub fn random_feature_map(seed: u64, channels: usize, spatial: [usize; 3]) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = channels * spatial.iter().product::<usize>();
    FeatureMap::from_vec(channels, spatial, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized buffer")
}

/// A solid ball of radius `r` at the centre of a cube of side `n`.
pub fn ball(n: usize, r: f64) -> Array3<bool> {
    let c = (n as f64 - 1.0) / 2.0;
    Array3::from_shape_fn((n, n, n), |(z, y, x)| {
        let d2 = (z as f64 - c).powi(2) + (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
        d2 <= r * r
    })
}

/// [`ball`] shifted by one voxel along x.
pub fn shifted_ball(n: usize, r: f64) -> Array3<bool> {
    let b = ball(n, r);
    Array3::from_shape_fn((n, n, n), |(z, y, x)| x > 0 && b[[z, y, x - 1]])
}
