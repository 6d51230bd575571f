use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{silu, upsample_nearest2x, Builder, Conv2d, GroupNorm, Init, Linear};
use crate::sampler::freeu::{freeu_reweight, FreeU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetArch {
    pub latent_channels: usize,
    /// Width per resolution, finest first.
    pub channels: Vec<usize>,
    pub token_dim: usize,
    pub attention_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            channels: vec![32, 64],
            token_dim: 32,
            attention_dim: 32,
            time_dim: 128,
            groups: 8,
        }
    }
}

impl UNetArch {
    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.channels.len() < 2 {
            errors.push("unet needs at least two stages".to_string());
        }
        if self.latent_channels == 0 || self.token_dim == 0 || self.attention_dim == 0 || self.time_dim < 2 {
            errors.push("unet widths must be positive".to_string());
        }
        for c in &self.channels {
            if self.groups == 0 || c % self.groups != 0 {
                errors.push(format!("unet width {c} not divisible into {} groups", self.groups));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}

/// Sinusoidal embedding of integer time steps, `(B, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((ti as f64 * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((ti as f64 * freq).cos() as f32);
        }
        v.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn build(b: &mut Builder, name: &str, cin: usize, cout: usize, arch: &UNetArch) -> Result<Self> {
        let mut b = b.push(name);
        let groups_in = if cin % arch.groups == 0 { arch.groups } else { 1 };
        Ok(Self {
            norm1: GroupNorm::new(&mut b, "norm1", groups_in, cin)?,
            conv1: Conv2d::new(&mut b, "conv1", cin, cout, 3, 1)?,
            temb: Linear::new(&mut b, "temb", arch.time_dim, cout)?,
            norm2: GroupNorm::new(&mut b, "norm2", arch.groups, cout)?,
            conv2: Conv2d::with_init(&mut b, "conv2", cout, cout, 3, 1, Init::Fan { fan_in: 9 * cout, gain: 0.5 })?,
            skip: if cin != cout { Some(Conv2d::new(&mut b, "skip", cin, cout, 1, 1)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let (b, _, _, c) = h.dims4()?;
        let h = h.broadcast_add(&self.temb.forward(temb)?.reshape((b, 1, 1, c))?)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head cross-attention from latent positions to global tokens.
#[derive(Debug, Clone)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    dim: usize,
}

impl CrossAttention {
    fn build(b: &mut Builder, name: &str, channels: usize, arch: &UNetArch) -> Result<Self> {
        let mut b = b.push(name);
        Ok(Self {
            norm: GroupNorm::new(&mut b, "norm", arch.groups, channels)?,
            q: Linear::new(&mut b, "q", channels, arch.attention_dim)?,
            k: Linear::new(&mut b, "k", arch.token_dim, arch.attention_dim)?,
            v: Linear::new(&mut b, "v", arch.token_dim, arch.attention_dim)?,
            out: Linear::new(&mut b, "out", arch.attention_dim, channels)?,
            dim: arch.attention_dim,
        })
    }

    fn forward(&self, x: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let q = self.q.forward(&self.norm.forward(x)?.reshape((b, h * w, c))?)?;
        let k = self.k.forward(tokens)?;
        let v = self.v.forward(tokens)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (self.dim as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let o = self.out.forward(&attn.matmul(&v)?)?;
        Ok((x + o.reshape((b, h, w, c))?)?)
    }
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    attn: CrossAttention,
}

impl Stage {
    fn forward(&self, x: &Tensor, temb: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        self.attn.forward(&self.res.forward(x, temb)?, tokens)
    }
}

/// x0-predicting UNet over the latent grid with time embedding and
/// cross-attention at every resolution.
#[derive(Debug, Clone)]
pub struct UNet {
    arch: UNetArch,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Stage>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid2: ResBlock,
    up: Vec<Stage>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn build(b: &mut Builder, arch: &UNetArch) -> Result<Self> {
        arch.validate()?;
        let mut b = b.push("unet");
        let ch = &arch.channels;
        let n = ch.len();
        let base = ch[0];
        let time1 = Linear::new(&mut b, "time1", base, arch.time_dim)?;
        let time2 = Linear::new(&mut b, "time2", arch.time_dim, arch.time_dim)?;
        let conv_in = Conv2d::new(&mut b, "conv_in", arch.in_channels(), base, 3, 1)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = base;
        for (i, &c) in ch.iter().enumerate() {
            down.push(Stage {
                res: ResBlock::build(&mut b, &format!("down{i}.res"), prev, c, arch)?,
                attn: CrossAttention::build(&mut b, &format!("down{i}.attn"), c, arch)?,
            });
            if i + 1 < n {
                downsample.push(Conv2d::new(&mut b, &format!("down{i}.sample"), c, c, 3, 2)?);
            }
            prev = c;
        }
        let top = ch[n - 1];
        let mid1 = ResBlock::build(&mut b, "mid.res1", top, top, arch)?;
        let mid_attn = CrossAttention::build(&mut b, "mid.attn", top, arch)?;
        let mid2 = ResBlock::build(&mut b, "mid.res2", top, top, arch)?;
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        let mut cur = top;
        for i in (0..n).rev() {
            let c = ch[i];
            up.push(Stage {
                res: ResBlock::build(&mut b, &format!("up{i}.res"), cur + c, c, arch)?,
                attn: CrossAttention::build(&mut b, &format!("up{i}.attn"), c, arch)?,
            });
            if i > 0 {
                upsample.push(Conv2d::new(&mut b, &format!("up{i}.sample"), c, c, 3, 1)?);
            }
            cur = c;
        }
        Ok(Self {
            arch: arch.clone(),
            time1,
            time2,
            conv_in,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            upsample,
            norm_out: GroupNorm::new(&mut b, "norm_out", arch.groups, base)?,
            conv_out: Conv2d::zeroed(&mut b, "conv_out", base, arch.latent_channels, 3)?,
        })
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    /// Predicts z0 from the stacked `(B, h, w, 2c + 1)` input.
    pub fn forward(&self, x: &Tensor, t: &[usize], tokens: &Tensor, freeu: Option<&FreeU>) -> Result<Tensor> {
        let (b, h, w, cin) = x.dims4()?;
        if cin != self.arch.in_channels() {
            return shape_err(format!("unet expects {} input channels, got {cin}", self.arch.in_channels()));
        }
        let n = self.arch.channels.len();
        let div = 1 << (n - 1);
        if h % div != 0 || w % div != 0 {
            return shape_err(format!("{h}x{w} latent not divisible by {div}"));
        }
        if t.len() != b || tokens.dims3()?.0 != b || tokens.dims3()?.2 != self.arch.token_dim {
            return shape_err(format!("time steps {} / tokens {:?} vs batch {b}", t.len(), tokens.dims()));
        }
        let temb = timestep_embedding(t, self.arch.channels[0], x.dtype())?;
        let temb = self.time2.forward(&silu(&self.time1.forward(&temb)?)?)?;
        let temb = silu(&temb)?;

        let mut hcur = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(n);
        for (i, stage) in self.down.iter().enumerate() {
            hcur = stage.forward(&hcur, &temb, tokens)?;
            skips.push(hcur.clone());
            if i + 1 < n {
                hcur = self.downsample[i].forward(&hcur)?;
            }
        }
        hcur = self.mid1.forward(&hcur, &temb)?;
        hcur = self.mid_attn.forward(&hcur, tokens)?;
        hcur = self.mid2.forward(&hcur, &temb)?;
        for (k, stage) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per stage");
            let (backbone, skip) = match freeu {
                Some(f) => freeu_reweight(&hcur, &skip, k + 1, f)?,
                None => (hcur, skip),
            };
            hcur = stage.forward(&Tensor::cat(&[&backbone, &skip], 3)?, &temb, tokens)?;
            if k + 1 < n {
                hcur = self.upsample[k].forward(&upsample_nearest2x(&hcur)?)?;
            }
        }
        self.conv_out.forward(&silu(&self.norm_out.forward(&hcur)?)?)
    }
}
