use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::Raster;
use crate::nn::ops::warp_forward;

/// Dense displacement field in pixels, `(dx, dy)` per grid point.
///
/// A flow is read backwards: warping an image by `F` produces
/// `out(p) = image(p + F(p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    /// Interleaved `dx, dy`, row-major.
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn constant(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        Self::from_fn(height, width, |_, _| (dx, dy))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                data.push(dx);
                data.push(dy);
            }
        }
        Self { height, width, data }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.height * self.width * 2 {
            return shape_err("flow data length does not match its resolution");
        }
        let bound = self.height.max(self.width) as f32;
        for v in &self.data {
            if !v.is_finite() {
                return Err(Error::Numerical("non-finite flow entry".into()));
            }
            if v.abs() >= bound {
                return Err(Error::Numerical(format!("flow displacement {v} exceeds grid bound {bound}")));
            }
        }
        Ok(())
    }

    /// Bilinear lookup of the field at a fractional position, zero outside.
    pub fn sample(&self, x: f32, y: f32) -> (f32, f32) {
        let r = self.as_raster();
        let out = sample_bilinear(&r, x, y);
        (out[0], out[1])
    }

    pub fn as_raster(&self) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: 2,
            data: self.data.clone(),
        }
    }

    pub fn from_raster(r: Raster) -> Result<Self> {
        if r.channels != 2 {
            return shape_err(format!("flow raster needs 2 channels, got {}", r.channels));
        }
        Ok(Self {
            height: r.height,
            width: r.width,
            data: r.data,
        })
    }

    pub fn max_magnitude(&self) -> f32 {
        self.data
            .chunks_exact(2)
            .map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt())
            .fold(0.0, f32::max)
    }

    pub fn scaled(&self, s: f32) -> FlowField {
        FlowField {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }
}

fn sample_bilinear(r: &Raster, x: f32, y: f32) -> Vec<f32> {
    let x0 = x.floor();
    let y0 = y.floor();
    let ax = x - x0;
    let ay = y - y0;
    let mut out = vec![0.0; r.channels];
    for (dy, dx, w) in [
        (0, 0, (1.0 - ax) * (1.0 - ay)),
        (0, 1, ax * (1.0 - ay)),
        (1, 0, (1.0 - ax) * ay),
        (1, 1, ax * ay),
    ] {
        let yy = y0 as isize + dy;
        let xx = x0 as isize + dx;
        if w == 0.0 || yy < 0 || xx < 0 || yy as usize >= r.height || xx as usize >= r.width {
            continue;
        }
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * r.get(yy as usize, xx as usize, c);
        }
    }
    out
}

/// Backward bilinear warp: `out(p) = image(p + flow(p))`, zero outside the canvas.
pub fn apply_flow(image: &Raster, flow: &FlowField) -> Result<Raster> {
    if image.height != flow.height || image.width != flow.width {
        return shape_err(format!(
            "apply_flow: image {}x{} vs flow {}x{}",
            image.height, image.width, flow.height, flow.width
        ));
    }
    let data = warp_forward(&image.data, &flow.data, 1, image.height, image.width, image.channels);
    Raster::from_vec(image.height, image.width, image.channels, data)
}

/// `(f ⊕ g)(p) = g(p) + f(p + g(p))`: warping by the result equals warping
/// by `f` and then by `g`.
pub fn compose_flows(f: &FlowField, g: &FlowField) -> Result<FlowField> {
    if f.resolution() != g.resolution() {
        return shape_err("compose_flows: resolution mismatch");
    }
    let fr = f.as_raster();
    Ok(FlowField::from_fn(g.height, g.width, |y, x| {
        let (gx, gy) = g.at(y, x);
        let s = sample_bilinear(&fr, x as f32 + gx, y as f32 + gy);
        (gx + s[0], gy + s[1])
    }))
}

/// Serialisable summary used in logs and reports.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EndpointError {
    pub mean: f64,
    pub max: f64,
}

/// Endpoint error between two flows over the points where `mask` is set.
pub fn endpoint_error(a: &FlowField, b: &FlowField, mask: Option<&Raster>) -> Result<EndpointError> {
    if a.resolution() != b.resolution() {
        return shape_err("endpoint_error: resolution mismatch");
    }
    let (mut sum, mut max, mut n) = (0.0f64, 0.0f64, 0usize);
    for y in 0..a.height {
        for x in 0..a.width {
            if mask.is_some_and(|m| m.get(y, x, 0) < 0.5) {
                continue;
            }
            let (ax, ay) = a.at(y, x);
            let (bx, by) = b.at(y, x);
            let e = (((ax - bx) as f64).powi(2) + ((ay - by) as f64).powi(2)).sqrt();
            sum += e;
            max = max.max(e);
            n += 1;
        }
    }
    Ok(EndpointError {
        mean: if n > 0 { sum / n as f64 } else { 0.0 },
        max,
    })
}
