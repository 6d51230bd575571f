//! Shared fixtures for the benchmarks.
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tryon_core::Raster;

/// Uniform noise image in [0, 1).
pub fn noise_raster(h: usize, w: usize, c: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::from_fn(h, w, c, |_, _, _| rng.random::<f32>())
}

/// `(b, h, w, c)` tensor of uniform values in `[lo, hi)`.
pub fn noise_tensor(shape: (usize, usize, usize, usize), lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
        .and_then(|t| t.to_dtype(DType::F32))
        .expect("fixture tensor")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded() {
        assert_eq!(noise_raster(4, 3, 2, 1), noise_raster(4, 3, 2, 1));
        let t = noise_tensor((1, 2, 2, 1), -1.0, 1.0, 3);
        assert_eq!(t.dims(), &[1, 2, 2, 1]);
    }
}
