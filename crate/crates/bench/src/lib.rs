//! Seeded inputs shared by the benchmarks.

use candle_core::{Device, Tensor};
use dsr_core::vq::lookup;
use dsr_core::{Codebook, FeatureGrid, Level, QuantizedGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn codebook(n_k: usize, dim: usize, level: Level, seed: u64) -> Codebook {
    Codebook::random_uniform(n_k, dim, level, &mut rng(seed), &Device::Cpu).unwrap()
}

/// `(B, D, H, W)` features drawn from the codebook's value range.
pub fn features(b: usize, dim: usize, h: usize, w: usize, n_k: usize, seed: u64) -> FeatureGrid {
    let bound = 1.0 / n_k as f32;
    let mut r = rng(seed);
    let data: Vec<f32> = (0..b * dim * h * w).map(|_| r.random_range(-bound..=bound)).collect();
    let t = Tensor::from_vec(data, (b, dim, h, w), &Device::Cpu).unwrap();
    FeatureGrid::new(t, Level::Hi).unwrap()
}

/// A grid of uniformly random assignments.
pub fn random_grid(cb: &Codebook, b: usize, h: usize, w: usize, seed: u64) -> QuantizedGrid {
    let mut r = rng(seed);
    let idx = (0..b * h * w).map(|_| r.random_range(0..cb.size() as u32)).collect();
    lookup(cb, idx, b, h, w).unwrap()
}

/// Scores with a mild positive shift on the labelled entries.
pub fn labelled_scores(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let l = r.random_bool(0.2);
            (r.random::<f64>() + if l { 0.3 } else { 0.0 }, l)
        })
        .unzip()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}
