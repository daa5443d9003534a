#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shiplab::vit::ViTConfig;
use shiplab::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::normal(shape, 1.0, rng)
}

/// 3 layers, d = 8, 2 heads, 4 patches.
pub fn small_config() -> ViTConfig {
    ViTConfig {
        num_layers: 3,
        embed_dim: 8,
        num_heads: 2,
        patch_grid: 2,
        patch_size: 2,
        mlp_ratio: 2,
        image_channels: 1,
        ln_eps: 1e-10,
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &Tensor) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| {
            (0..b.cols())
                .map(|j| r.iter().enumerate().map(|(k, x)| x * b.at(k, j)).sum())
                .collect()
        })
        .collect()
}

pub fn add_bias(a: &mut [Vec<f64>], b: &Tensor) {
    for r in a {
        for (x, y) in r.iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

pub fn max_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
    let mut m: f64 = 0.0;
    for (i, r) in a.iter().enumerate() {
        for (j, x) in r.iter().enumerate() {
            m = m.max((x - b.at(i, j)).abs());
        }
    }
    m
}
