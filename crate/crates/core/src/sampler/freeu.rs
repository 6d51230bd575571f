use candle_core::{DType, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone (`b`) and skip (`s`) factors for the first two decoder stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeU {
    pub b1: f64,
    pub b2: f64,
    pub s1: f64,
    pub s2: f64,
}

impl Default for FreeU {
    fn default() -> Self {
        Self {
            b1: 1.1,
            b2: 1.2,
            s1: 0.9,
            s2: 0.6,
        }
    }
}

impl FreeU {
    pub const IDENTITY: FreeU = FreeU {
        b1: 1.0,
        b2: 1.0,
        s1: 1.0,
        s2: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("b1", self.b1), ("b2", self.b2), ("s1", self.s1), ("s2", self.s2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("FreeU factor {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `(b, s)` for a 1-based decoder stage, `None` for untouched stages.
    pub fn factors(&self, stage: usize) -> Option<(f64, f64)> {
        match stage {
            1 => Some((self.b1, self.s1)),
            2 => Some((self.b2, self.s2)),
            _ => None,
        }
    }
}

/// Fraction of Nyquist below which a frequency counts as low.
pub const LOW_BAND: f64 = 0.25;

fn is_low(k: usize, n: usize) -> bool {
    let f = k.min(n - k) as f64 / n as f64;
    f <= LOW_BAND * 0.5 + 1e-12
}

/// Scales the first `ceil(C/2)` channels of the backbone feature by `b` and
/// the low-frequency band of the skip feature by `s`. Stages other than 1
/// and 2 pass through.
pub fn freeu_reweight(backbone: &Tensor, skip: &Tensor, stage: usize, factors: &FreeU) -> Result<(Tensor, Tensor)> {
    factors.validate()?;
    let Some((b, s)) = factors.factors(stage) else {
        return Ok((backbone.clone(), skip.clone()));
    };
    let backbone = if b == 1.0 {
        backbone.clone()
    } else {
        let c = backbone.dim(3)?;
        let half = c.div_ceil(2);
        let head = backbone.narrow(3, 0, half)?.affine(b, 0.0)?;
        if half == c {
            head
        } else {
            Tensor::cat(&[&head, &backbone.narrow(3, half, c - half)?], 3)?
        }
    };
    let skip = if s == 1.0 { skip.clone() } else { scale_low_band(skip, s)? };
    Ok((backbone, skip))
}

/// Multiplies the low-frequency 2-D Fourier coefficients of every channel of
/// a `(B, H, W, C)` tensor by `s`.
pub fn scale_low_band(x: &Tensor, s: f64) -> Result<Tensor> {
    let (bn, h, w, c) = x.dims4()?;
    let dtype = x.dtype();
    let data = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut planner = FftPlanner::<f64>::new();
    let (fh, fw) = (planner.plan_fft_forward(h), planner.plan_fft_forward(w));
    let (ih, iw) = (planner.plan_fft_inverse(h), planner.plan_fft_inverse(w));
    let mut out = vec![0f64; data.len()];
    let mut grid = vec![Complex::new(0.0, 0.0); h * w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for bi in 0..bn {
        for ch in 0..c {
            let at = |y: usize, xx: usize| ((bi * h + y) * w + xx) * c + ch;
            for y in 0..h {
                for xx in 0..w {
                    grid[y * w + xx] = Complex::new(data[at(y, xx)], 0.0);
                }
            }
            for row in grid.chunks_mut(w) {
                fw.process(row);
            }
            for xx in 0..w {
                for y in 0..h {
                    col[y] = grid[y * w + xx];
                }
                fh.process(&mut col);
                for y in 0..h {
                    let mut v = col[y];
                    if is_low(y, h) && is_low(xx, w) {
                        v *= s;
                    }
                    col[y] = v;
                }
                ih.process(&mut col);
                for y in 0..h {
                    grid[y * w + xx] = col[y];
                }
            }
            for row in grid.chunks_mut(w) {
                iw.process(row);
            }
            let norm = (h * w) as f64;
            for y in 0..h {
                for xx in 0..w {
                    out[at(y, xx)] = grid[y * w + xx].re / norm;
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (bn, h, w, c), x.device())?.to_dtype(dtype)?)
}
