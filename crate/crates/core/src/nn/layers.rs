use candle_core::{Tensor, D};

use super::ops::Im2Col;
use super::params::{Builder, Init};
use crate::error::Result;

/// Square convolution over `(B, H, W, C)` with "same"-style padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    geometry: Im2Col,
    cout: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_init(b, name, cin, cout, kernel, stride, Init::Fan { fan_in: kernel * kernel * cin, gain: 2f64.sqrt() })
    }

    /// A convolution whose weights and bias start at exactly zero.
    pub fn zeroed(b: &mut Builder, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        Self::with_init(b, name, cin, cout, kernel, 1, Init::Zeros)
    }

    pub fn with_init(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let mut b = b.push(name);
        let weight = b.param("weight", &[kernel * kernel * cin, cout], init)?;
        let bias = b.param("bias", &[cout], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            geometry: Im2Col {
                kernel,
                stride,
                pad: kernel / 2,
            },
            cout,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let (oh, ow) = self.geometry.out_hw(h, w);
        let cols = if self.geometry.kernel == 1 && self.geometry.stride == 1 {
            x.reshape((b * h * w, ()))?
        } else {
            x.contiguous()?.apply_op1(self.geometry)?
        };
        let y = cols.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, oh, ow, self.cout))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
    dout: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize) -> Result<Self> {
        let mut b = b.push(name);
        Ok(Self {
            weight: b.param("weight", &[din, dout], Init::Fan { fan_in: din, gain: 1.0 })?,
            bias: b.param("bias", &[dout], Init::Zeros)?,
            dout,
        })
    }

    /// Applies over the last axis of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut dims = x.dims().to_vec();
        let din = dims.pop().unwrap_or(1);
        let rows: usize = dims.iter().product();
        let y = x
            .reshape((rows, din))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        dims.push(self.dout);
        Ok(y.reshape(dims)?)
    }
}

/// Group normalisation for channels-last tensors.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, name: &str, groups: usize, channels: usize) -> Result<Self> {
        let mut b = b.push(name);
        Ok(Self {
            gamma: b.param("gamma", &[channels], Init::Const(1.0))?,
            beta: b.param("beta", &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((b, h * w, g, c / g))?;
        let xg = xg.transpose(1, 2)?.contiguous()?.reshape((b, g, h * w * (c / g)))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let normed = normed
            .reshape((b, g, h * w, c / g))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, h, w, c))?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // tanh form: no overflow in either direction, so gradients stay finite
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Nearest-neighbour ×2 upsampling of `(B, H, W, C)`.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let y = x
        .reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?;
    Ok(y)
}

/// Bilinear ×2 upsampling (half-pixel centres, edge replication) of `(B, H, W, C)`.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let x = interleave_axis(x, 1)?;
    interleave_axis(&x, 2)
}

fn interleave_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let n = x.dim(axis)?;
    let prev = if n > 1 {
        Tensor::cat(&[x.narrow(axis, 0, 1)?, x.narrow(axis, 0, n - 1)?], axis)?
    } else {
        x.clone()
    };
    let next = if n > 1 {
        Tensor::cat(&[x.narrow(axis, 1, n - 1)?, x.narrow(axis, n - 1, 1)?], axis)?
    } else {
        x.clone()
    };
    let even = ((x * 0.75)? + (prev * 0.25)?)?;
    let odd = ((x * 0.75)? + (next * 0.25)?)?;
    let stacked = Tensor::stack(&[even, odd], axis + 1)?;
    let mut dims = x.dims().to_vec();
    dims[axis] *= 2;
    Ok(stacked.reshape(dims)?)
}

/// Folds each 2×2 block into channels: `(B, H, W, C)` → `(B, H/2, W/2, 4C)`.
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return crate::error::shape_err(format!("space_to_depth on odd grid {h}x{w}"));
    }
    let y = x
        .reshape((b, h / 2, 2, w / 2, 2 * c))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b, h / 2, w / 2, 4 * c))?;
    Ok(y)
}

/// Inverse of [`space_to_depth`]: `(B, H, W, 4C)` → `(B, 2H, 2W, C)`.
pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c4) = x.dims4()?;
    if c4 % 4 != 0 {
        return crate::error::shape_err(format!("depth_to_space needs a multiple of 4 channels, got {c4}"));
    }
    let c = c4 / 4;
    let y = x
        .reshape((b, h, w, 2, 2 * c))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?;
    Ok(y)
}

/// 2×2 average pooling of `(B, H, W, C)`; H and W must be even.
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return crate::error::shape_err(format!("avg_pool2x on odd grid {h}x{w}"));
    }
    let y = x
        .reshape((b, h / 2, 2, w / 2, 2, c))?
        .sum(4)?
        .sum(2)?
        .affine(0.25, 0.0)?;
    Ok(y)
}

/// Average pooling by an integer factor `k` (H and W divisible by `k`).
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % k != 0 || w % k != 0 {
        return crate::error::shape_err(format!("avg_pool by {k} on {h}x{w}"));
    }
    let y = x
        .reshape((b, h / k, k, w / k, k, c))?
        .sum(4)?
        .sum(2)?
        .affine(1.0 / (k * k) as f64, 0.0)?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn space_depth_round_trip() {
        let x = Tensor::arange(0f32, 96.0, &Device::Cpu).unwrap().reshape((2, 4, 2, 6)).unwrap();
        let y = space_to_depth(&x).unwrap();
        assert_eq!(y.dims(), &[2, 2, 1, 24]);
        // block (0, 0) of item 0: pixels (0,0), (0,1), (1,0), (1,1) in that order
        let v = y.get(0).unwrap().get(0).unwrap().get(0).unwrap().to_vec1::<f32>().unwrap();
        let px = |yy: usize, xx: usize| (yy * 2 + xx) * 6;
        let expect: Vec<f32> = [px(0, 0), px(0, 1), px(1, 0), px(1, 1)]
            .iter()
            .flat_map(|&o| (0..6).map(move |c| (o + c) as f32))
            .collect();
        assert_eq!(v, expect);
        let back = depth_to_space(&y).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut store = ParamStore::new(3, DType::F64);
        let mut b = Builder::new(&mut store, false);
        let conv = Conv2d::new(&mut b, "c", 2, 3, 3, 1).unwrap();
        let x: Vec<f64> = (0..4 * 5 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let xt = Tensor::from_vec(x.clone(), (1, 4, 5, 2), &Device::Cpu).unwrap();
        let y = conv.forward(&xt).unwrap();
        let wv = store.var("c.weight").unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // direct evaluation at (1, 2, channel 1)
        let mut acc = 0.0;
        for ky in 0..3 {
            for kx in 0..3 {
                for ci in 0..2 {
                    let (iy, ix) = (1 + ky - 1, 2 + kx - 1);
                    acc += x[(iy * 5 + ix) * 2 + ci] * wv[((ky * 3 + kx) * 2 + ci) * 3 + 1];
                }
            }
        }
        let got = y.get(0).unwrap().get(1).unwrap().get(2).unwrap().get(1).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - acc).abs() < 1e-12);
    }

    #[test]
    fn strided_conv_halves_grid() {
        let mut store = ParamStore::new(3, DType::F32);
        let mut b = Builder::new(&mut store, false);
        let conv = Conv2d::new(&mut b, "c", 3, 4, 3, 2).unwrap();
        let x = Tensor::zeros((2, 64, 48, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[2, 32, 24, 4]);
    }

    #[test]
    fn upsampling_preserves_constants() {
        let x = Tensor::full(2.5f32, (1, 3, 2, 2), &Device::Cpu).unwrap();
        for y in [upsample_bilinear2x(&x).unwrap(), upsample_nearest2x(&x).unwrap()] {
            assert_eq!(y.dims(), &[1, 6, 4, 2]);
            assert!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 2.5));
        }
        let p = avg_pool2x(&upsample_nearest2x(&x).unwrap()).unwrap();
        assert_eq!(p.dims(), &[1, 3, 2, 2]);
    }

    #[test]
    fn bilinear_upsample_of_ramp() {
        let x = Tensor::from_vec(vec![0f32, 1.0, 2.0, 3.0], (1, 1, 4, 1), &Device::Cpu).unwrap();
        let y = upsample_bilinear2x(&x).unwrap().get(0).unwrap().get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0]);
    }
}
