//! The autoencoder that maps canvas images to the diffusion latent space,
//! plus mask down-sizing and perceptual feature taps.

pub mod autoencoder;
pub mod training;

use candle_core::Tensor;

use crate::error::{shape_err, Error, Result};
use crate::image::{Mask, Raster};

pub use autoencoder::{Autoencoder, AutoencoderArch, Decoder, Encoder};
pub use training::{train_autoencoder, AutoencoderConfig, AutoencoderReport};

/// A latent grid with the downsampling factor that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub data: Raster,
    pub downsample: usize,
}

impl LatentTensor {
    pub fn channels(&self) -> usize {
        self.data.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dims()
    }
}

/// Something that maps an image batch to a list of feature grids; gradients
/// flow to the input but never into the extractor's own parameters.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Block-average a binary mask by `d` and threshold at 0.5 (ties count as inside).
pub fn downsize_mask(m: &Mask, d: usize) -> Result<Mask> {
    if d == 0 {
        return Err(Error::Argument("downsample factor must be positive".into()));
    }
    if m.channels != 1 {
        return shape_err(format!("mask has {} channels", m.channels));
    }
    if m.height % d != 0 || m.width % d != 0 {
        return shape_err(format!("{}x{} mask not divisible by {d}", m.height, m.width));
    }
    let (h, w) = (m.height / d, m.width / d);
    let area = (d * d) as f32;
    Ok(Raster::mask_from_fn(h, w, |y, x| {
        let mut s = 0.0;
        for dy in 0..d {
            for dx in 0..d {
                s += m.get(y * d + dy, x * d + dx, 0);
            }
        }
        s / area >= 0.5
    }))
}

/// Down-sized masks of a batch as a `(B, h, w, 1)` tensor.
pub fn downsize_mask_tensor(m: &Tensor, d: usize) -> Result<Tensor> {
    let pooled = crate::nn::avg_pool(m, d)?;
    Ok(pooled.ge(0.5)?.to_dtype(m.dtype())?)
}
