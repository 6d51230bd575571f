//! Thin-plate-spline displacement fields.

use nalgebra::{DMatrix, DVector};

use super::field::FlowField;
use crate::error::{Error, Result};

/// A 2-D point in pixel coordinates, `x` along columns and `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[inline]
fn kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Interpolating thin-plate spline of a displacement field: it reproduces
/// the control displacements exactly and minimises bending energy.
#[derive(Debug, Clone)]
pub struct Tps {
    centers: Vec<Point>,
    wx: Vec<f64>,
    wy: Vec<f64>,
    ax: [f64; 3],
    ay: [f64; 3],
}

impl Tps {
    /// Fits the spline that displaces each `src[i]` onto `dst[i]`.
    pub fn fit(src: &[Point], dst: &[Point]) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::Argument(format!(
                "tps: {} source vs {} destination points",
                src.len(),
                dst.len()
            )));
        }
        let n = src.len();
        if n < 3 {
            return Err(Error::Argument("tps needs at least 3 control points".into()));
        }
        if collinear(src) {
            return Err(Error::Numerical("tps: control points are collinear".into()));
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let dx = src[i].x - src[j].x;
                let dy = src[i].y - src[j].y;
                a[(i, j)] = kernel(dx * dx + dy * dy);
            }
            for (k, v) in [1.0, src[i].x, src[i].y].into_iter().enumerate() {
                a[(i, n + k)] = v;
                a[(n + k, i)] = v;
            }
        }
        let mut rhs = DMatrix::<f64>::zeros(m, 2);
        for i in 0..n {
            rhs[(i, 0)] = dst[i].x - src[i].x;
            rhs[(i, 1)] = dst[i].y - src[i].y;
        }
        let sol = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("tps: singular system".into()))?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("tps: non-finite solution".into()));
        }
        let col = |c: usize| -> Vec<f64> { (0..n).map(|i| sol[(i, c)]).collect() };
        Ok(Self {
            centers: src.to_vec(),
            wx: col(0),
            wy: col(1),
            ax: [sol[(n, 0)], sol[(n + 1, 0)], sol[(n + 2, 0)]],
            ay: [sol[(n, 1)], sol[(n + 1, 1)], sol[(n + 2, 1)]],
        })
    }

    /// Displacement at `(x, y)`.
    pub fn eval(&self, x: f64, y: f64) -> (f64, f64) {
        let mut dx = self.ax[0] + self.ax[1] * x + self.ax[2] * y;
        let mut dy = self.ay[0] + self.ay[1] * x + self.ay[2] * y;
        for (i, c) in self.centers.iter().enumerate() {
            let u = kernel((x - c.x).powi(2) + (y - c.y).powi(2));
            dx += self.wx[i] * u;
            dy += self.wy[i] * u;
        }
        (dx, dy)
    }

    /// Jacobian of the displacement, `[[ddx/dx, ddx/dy], [ddy/dx, ddy/dy]]`.
    pub fn jacobian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let mut j = [[self.ax[1], self.ax[2]], [self.ay[1], self.ay[2]]];
        for (i, c) in self.centers.iter().enumerate() {
            let (ex, ey) = (x - c.x, y - c.y);
            let r2 = ex * ex + ey * ey;
            if r2 <= 0.0 {
                continue;
            }
            // d/dx [0.5 r² ln r²] = x (ln r² + 1)
            let g = r2.ln() + 1.0;
            j[0][0] += self.wx[i] * ex * g;
            j[0][1] += self.wx[i] * ey * g;
            j[1][0] += self.wy[i] * ex * g;
            j[1][1] += self.wy[i] * ey * g;
        }
        j
    }

    /// Dense displacement field on an `height x width` pixel grid.
    pub fn flow(&self, height: usize, width: usize) -> FlowField {
        FlowField::from_fn(height, width, |y, x| {
            let (dx, dy) = self.eval(x as f64, y as f64);
            (dx as f32, dy as f32)
        })
    }

    /// Numerical inverse on the grid: for each `q`, the displacement `d` with
    /// `p = q + d` satisfying `p + T(p) = q`. Newton iterations from `q - T(q)`.
    pub fn inverse_flow(&self, height: usize, width: usize) -> Result<FlowField> {
        let mut data = Vec::with_capacity(height * width * 2);
        for qy in 0..height {
            for qx in 0..width {
                let (tx, ty) = (qx as f64, qy as f64);
                let (d0x, d0y) = self.eval(tx, ty);
                let (mut px, mut py) = (tx - d0x, ty - d0y);
                let mut converged = false;
                for _ in 0..50 {
                    let (dx, dy) = self.eval(px, py);
                    let rx = px + dx - tx;
                    let ry = py + dy - ty;
                    if rx.abs() < 1e-9 && ry.abs() < 1e-9 {
                        converged = true;
                        break;
                    }
                    let j = self.jacobian(px, py);
                    let (a, b, c, d) = (1.0 + j[0][0], j[0][1], j[1][0], 1.0 + j[1][1]);
                    let det = a * d - b * c;
                    if det.abs() < 1e-12 {
                        break;
                    }
                    px -= (d * rx - b * ry) / det;
                    py -= (-c * rx + a * ry) / det;
                }
                if !converged {
                    return Err(Error::Numerical(format!("tps inverse failed to converge at ({qx}, {qy})")));
                }
                data.push((px - tx) as f32);
                data.push((py - ty) as f32);
            }
        }
        Ok(FlowField { height, width, data })
    }

    /// Smallest Jacobian determinant of `p ↦ p + T(p)` over the grid;
    /// non-positive values mean the map folds over.
    pub fn min_jacobian_det(&self, height: usize, width: usize) -> f64 {
        let mut min = f64::INFINITY;
        for y in 0..height {
            for x in 0..width {
                let j = self.jacobian(x as f64, y as f64);
                let det = (1.0 + j[0][0]) * (1.0 + j[1][1]) - j[0][1] * j[1][0];
                min = min.min(det);
            }
        }
        min
    }
}

fn collinear(points: &[Point]) -> bool {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.x / n, b + p.y / n));
    let mut cov = DMatrix::<f64>::zeros(2, 2);
    for p in points {
        let v = DVector::from_vec(vec![p.x - mx, p.y - my]);
        cov += &v * v.transpose();
    }
    let eig = cov.symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    hi <= 0.0 || lo <= 1e-9 * hi
}

/// Dense flow of the spline mapping `src` onto `dst`.
pub fn tps_flow(src: &[Point], dst: &[Point], resolution: (usize, usize)) -> Result<FlowField> {
    Ok(Tps::fit(src, dst)?.flow(resolution.0, resolution.1))
}
