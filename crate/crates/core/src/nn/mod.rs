//! Small channels-last neural-network toolkit on top of candle tensors.

pub mod layers;
pub mod ops;
pub mod params;

pub use layers::{avg_pool, avg_pool2x, depth_to_space, relu, space_to_depth, sigmoid, silu, upsample_bilinear2x, upsample_nearest2x, Conv2d, GroupNorm, Linear};
pub use ops::{warp, BilinearWarp, Im2Col};
pub use params::{checkpoint_exists, Builder, Checkpoint, CheckpointMeta, Init, ParamStore};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

/// Standard-normal tensor drawn from a caller-owned generator, so every
/// random draw in a run is reproducible from its seed.
pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], dtype: DType) -> crate::Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}
