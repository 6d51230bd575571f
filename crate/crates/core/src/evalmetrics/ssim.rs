use crate::error::{shape_err, Result};
use crate::image::Raster;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0f64; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering of one `h × w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every valid 11×11 Gaussian window and every channel, for
/// images with values in [0, 1].
pub fn ssim(x: &Raster, y: &Raster) -> Result<f64> {
    x.ensure_same_grid(y, "ssim operands")?;
    let (h, w, c) = x.dims();
    if h < WINDOW || w < WINDOW {
        return shape_err(format!("ssim needs at least {WINDOW}x{WINDOW} pixels, got {h}x{w}"));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let px: Vec<f64> = (0..h * w).map(|i| x.data[i * c + ch] as f64).collect();
        let py: Vec<f64> = (0..h * w).map(|i| y.data[i * c + ch] as f64).collect();
        let xx: Vec<f64> = px.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = py.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = px.iter().zip(&py).map(|(a, b)| a * b).collect();
        let mx = filter(&px, h, w, &k);
        let my = filter(&py, h, w, &k);
        let sxx = filter(&xx, h, w, &k);
        let syy = filter(&yy, h, w, &k);
        let sxy = filter(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            total += ((2.0 * a * b + C1) * (2.0 * cov + C2)) / ((a * a + b * b + C1) * (vx + vy + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
