use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{FeatureExtractor, LatentTensor};
use crate::error::{shape_err, Error, Result};
use crate::image::Raster;
use crate::nn::{
    depth_to_space, relu, sigmoid, space_to_depth, upsample_nearest2x, Builder, Checkpoint, CheckpointMeta, Conv2d, Init,
    ParamStore,
};

/// Encoder/decoder layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderArch {
    /// Spatial downsampling factor `d` (a power of two).
    pub downsample: usize,
    pub latent_channels: usize,
    /// Channels of the decoder's last full-resolution layer.
    pub base_width: usize,
    /// Channels at strides 2, 4, 8, … ; at least three levels are always built
    /// so the perceptual taps exist.
    pub widths: Vec<usize>,
    /// Mean + log-variance head (KL-regularised) instead of a plain latent head.
    pub regularized: bool,
    /// Multiplies encoder means (and divides decoder inputs) so latents have
    /// roughly unit spread; fitted after training.
    pub latent_scale: f32,
}

impl Default for AutoencoderArch {
    fn default() -> Self {
        Self {
            downsample: 4,
            latent_channels: 4,
            base_width: 8,
            widths: vec![24, 32, 32],
            regularized: true,
            latent_scale: 1.0,
        }
    }
}

impl AutoencoderArch {
    pub fn latent_level(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn depth(&self) -> usize {
        self.latent_level().max(3)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            errs.push(format!("downsample {} must be a power of two ≥ 2", self.downsample));
        }
        if self.latent_channels == 0 || self.base_width == 0 {
            errs.push("latent_channels and base_width must be positive".into());
        }
        if self.widths.len() < self.depth() || self.widths.contains(&0) {
            errs.push(format!("need {} positive widths, got {:?}", self.depth(), self.widths));
        }
        if !(self.latent_scale > 0.0 && self.latent_scale.is_finite()) {
            errs.push("latent_scale must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    fn head_channels(&self) -> usize {
        if self.regularized {
            2 * self.latent_channels
        } else {
            self.latent_channels
        }
    }
}

fn unit_gain(cin: usize) -> Init {
    Init::Fan {
        fan_in: 9 * cin,
        gain: 1.0,
    }
}

/// Stride-2 entry by folding 2×2 blocks into channels, then strided convs.
pub struct Encoder {
    arch: AutoencoderArch,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    mix: Conv2d,
    head: Conv2d,
}

/// Raw encoder outputs for a batch.
pub struct EncoderOutput {
    /// Posterior mean (already multiplied by `latent_scale`).
    pub mean: Tensor,
    /// Log-variance of the unscaled posterior, when regularised.
    pub logvar: Option<Tensor>,
    /// Feature taps at strides 2, 4 and 8.
    pub taps: Vec<Tensor>,
}

impl Encoder {
    pub fn build(b: &mut Builder, arch: &AutoencoderArch) -> Result<Self> {
        let mut b = b.push("encoder");
        let stem = Conv2d::new(&mut b, "stem", 12, arch.widths[0], 3, 1)?;
        let mut downs = Vec::new();
        for k in 1..arch.depth() {
            downs.push(Conv2d::new(&mut b, &format!("down{k}"), arch.widths[k - 1], arch.widths[k], 3, 2)?);
        }
        let lw = arch.widths[arch.latent_level() - 1];
        let mix = Conv2d::new(&mut b, "mix", lw, lw, 3, 1)?;
        let head = Conv2d::with_init(&mut b, "head", lw, arch.head_channels(), 3, 1, unit_gain(lw))?;
        Ok(Self {
            arch: arch.clone(),
            stem,
            downs,
            mix,
            head,
        })
    }

    fn levels(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, h, w, c) = x.dims4()?;
        let d = 1 << self.arch.depth();
        if c != 3 {
            return shape_err(format!("encoder expects 3 channels, got {c}"));
        }
        if h % d != 0 || w % d != 0 {
            return shape_err(format!("{h}x{w} input not divisible by {d}"));
        }
        let mut h = relu(&self.stem.forward(&space_to_depth(x)?)?)?;
        let mut levels = vec![h.clone()];
        for down in &self.downs {
            h = relu(&down.forward(&h)?)?;
            levels.push(h.clone());
        }
        Ok(levels)
    }

    pub fn forward(&self, x: &Tensor) -> Result<EncoderOutput> {
        let levels = self.levels(x)?;
        let l = self.arch.latent_level();
        // fold deeper levels back up to the latent resolution
        let mut h = levels[levels.len() - 1].clone();
        for k in (l..levels.len()).rev() {
            h = (&levels[k - 1] + upsample_nearest2x(&h)?)?;
        }
        let h = relu(&self.mix.forward(&h)?)?;
        let out = self.head.forward(&h)?;
        let c = self.arch.latent_channels;
        let (mean, logvar) = if self.arch.regularized {
            (out.narrow(3, 0, c)?, Some(out.narrow(3, c, c)?.clamp(-30.0, 20.0)?))
        } else {
            (out, None)
        };
        Ok(EncoderOutput {
            mean: (mean * self.arch.latent_scale as f64)?,
            logvar,
            taps: levels.into_iter().take(3).collect(),
        })
    }
}

impl FeatureExtractor for Encoder {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.levels(x)?.into_iter().take(3).collect())
    }
}

/// Convs at the latent grid, then per level a conv to four times the next
/// width unfolded by [`depth_to_space`].
pub struct Decoder {
    arch: AutoencoderArch,
    stem: Conv2d,
    stem2: Conv2d,
    ups: Vec<(Conv2d, Option<Conv2d>)>,
    out: Conv2d,
}

impl Decoder {
    pub fn build(b: &mut Builder, arch: &AutoencoderArch) -> Result<Self> {
        let mut b = b.push("decoder");
        let l = arch.latent_level();
        let lw = arch.widths[l - 1];
        let stem = Conv2d::new(&mut b, "stem", arch.latent_channels, lw, 3, 1)?;
        let stem2 = Conv2d::new(&mut b, "stem2", lw, lw, 3, 1)?;
        let mut ups = Vec::new();
        for k in (1..=l).rev() {
            let cin = arch.widths[k - 1];
            let cout = if k == 1 { arch.base_width } else { arch.widths[k - 2] };
            let up = Conv2d::new(&mut b, &format!("up{k}"), cin, 4 * cout, 3, 1)?;
            let refine = if k > 1 {
                Some(Conv2d::new(&mut b, &format!("refine{k}"), cout, cout, 3, 1)?)
            } else {
                None
            };
            ups.push((up, refine));
        }
        let out = Conv2d::with_init(&mut b, "out", arch.base_width, 3, 3, 1, unit_gain(arch.base_width))?;
        Ok(Self {
            arch: arch.clone(),
            stem,
            stem2,
            ups,
            out,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let c = z.dim(3)?;
        if c != self.arch.latent_channels {
            return shape_err(format!("decoder expects {} latent channels, got {c}", self.arch.latent_channels));
        }
        let z = (z / self.arch.latent_scale as f64)?;
        let mut h = relu(&self.stem.forward(&z)?)?;
        h = relu(&self.stem2.forward(&h)?)?;
        for (up, refine) in &self.ups {
            h = relu(&depth_to_space(&up.forward(&h)?)?)?;
            if let Some(r) = refine {
                h = relu(&r.forward(&h)?)?;
            }
        }
        sigmoid(&self.out.forward(&h)?)
    }
}

/// A parameter set with frozen views of its encoder and decoder.
pub struct Autoencoder {
    pub arch: AutoencoderArch,
    pub params: ParamStore,
    pub meta: CheckpointMeta,
    encoder: Encoder,
    decoder: Decoder,
}

impl Autoencoder {
    pub fn new(arch: AutoencoderArch, seed: u64, dtype: DType) -> Result<Self> {
        arch.validate()?;
        let params = ParamStore::new(seed, dtype);
        let meta = CheckpointMeta {
            role: "autoencoder".into(),
            seed,
            step: 0,
            loss: f64::NAN,
            trained: false,
            config_fingerprint: String::new(),
        };
        Self::from_parts(arch, params, meta)
    }

    fn assemble(arch: AutoencoderArch, params: &mut ParamStore) -> Result<(Encoder, Decoder)> {
        let mut b = Builder::new(params, true);
        Ok((Encoder::build(&mut b, &arch)?, Decoder::build(&mut b, &arch)?))
    }

    pub fn from_parts(arch: AutoencoderArch, mut params: ParamStore, meta: CheckpointMeta) -> Result<Self> {
        arch.validate()?;
        let (encoder, decoder) = Self::assemble(arch.clone(), &mut params)?;
        Ok(Self {
            arch,
            params,
            meta,
            encoder,
            decoder,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !crate::nn::checkpoint_exists(dir) {
            return Err(Error::dependency(format!("autoencoder checkpoint at {}", dir.display()), "train-autoencoder"));
        }
        let ck: Checkpoint<AutoencoderArch> = Checkpoint::load(dir, DType::F32)?;
        Self::from_parts(ck.arch, ck.params, ck.meta)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let ck = Checkpoint {
            arch: self.arch.clone(),
            meta: self.meta.clone(),
            params: self.params.to_dtype(DType::F32)?,
        };
        ck.save(dir)
    }

    /// Frozen encoder (no gradients reach its parameters).
    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Trainable views sharing storage with the frozen ones.
    pub fn trainable(&mut self) -> Result<(Encoder, Decoder)> {
        let mut b = Builder::new(&mut self.params, false);
        Ok((Encoder::build(&mut b, &self.arch)?, Decoder::build(&mut b, &self.arch)?))
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Deterministic encoding: the (scaled) posterior mean.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.forward(x)?.mean)
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    pub fn encode(&self, image: &Raster) -> Result<LatentTensor> {
        let d = self.arch.downsample;
        if image.height % d != 0 || image.width % d != 0 {
            return shape_err(format!("{}x{} image not divisible by {d}", image.height, image.width));
        }
        let z = self.encode_tensor(&image.to_tensor(&Device::Cpu, self.dtype())?)?;
        Ok(LatentTensor {
            data: Raster::from_tensor(&z)?,
            downsample: d,
        })
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<Raster> {
        if latent.downsample != self.arch.downsample {
            return shape_err(format!(
                "latent downsample {} vs autoencoder {}",
                latent.downsample, self.arch.downsample
            ));
        }
        Raster::from_tensor(&self.decode_tensor(&latent.data.to_tensor(&Device::Cpu, self.dtype())?)?)
    }

    /// Encoder activations at strides 2, 4 and 8; requires trained parameters.
    pub fn perceptual_features(&self, image: &Raster) -> Result<Vec<Raster>> {
        self.ensure_trained()?;
        let feats = self.encoder.features(&image.to_tensor(&Device::Cpu, self.dtype())?)?;
        feats.iter().map(Raster::from_tensor).collect()
    }

    pub fn ensure_trained(&self) -> Result<()> {
        if self.meta.trained {
            Ok(())
        } else {
            Err(Error::Usage("perceptual features need a trained autoencoder".into()))
        }
    }

    pub fn hash(&self) -> Result<String> {
        self.params.hash()
    }
}
