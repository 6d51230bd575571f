use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::person::{BodyFrame, PersonContext, PersonSpec};
use crate::error::{Error, Result};
use crate::flowwarp::field::{compose_flows, FlowField};
use crate::flowwarp::tps::{Point, Tps};
use crate::image::Mask;

/// Knobs of the ground-truth deformation sampler.
#[derive(Debug, Clone, Copy)]
pub struct TruthWarpConfig {
    /// Control-point jitter, fraction of canvas width.
    pub jitter: f64,
    /// Largest allowed displacement over the try-on region, fraction of canvas width.
    pub max_displacement: f64,
    /// Largest allowed interior residual of `inverse ∘ forward`, pixels.
    pub max_round_trip: f32,
    pub retries: usize,
}

impl Default for TruthWarpConfig {
    fn default() -> Self {
        Self {
            jitter: 0.04,
            max_displacement: 0.15,
            max_round_trip: 0.4,
            retries: 32,
        }
    }
}

/// Ground-truth warp from the person frame onto the flat garment, and its inverse.
#[derive(Debug, Clone)]
pub struct TruthWarp {
    /// Person frame → garment frame: `C_w(p) = C(p + forward(p))`.
    pub forward: FlowField,
    /// Garment frame → person frame.
    pub inverse: FlowField,
    pub src: Vec<Point>,
    pub dst: Vec<Point>,
}

/// Samples a thin-plate deformation carrying the person's torso lattice onto
/// the canonical garment lattice with Gaussian jitter, rejecting fold-overs
/// and oversized displacements.
pub fn gen_truth_warp(person: &PersonContext, seed: u64) -> Result<TruthWarp> {
    gen_truth_warp_with(person, seed, TruthWarpConfig::default())
}

pub fn gen_truth_warp_with(person: &PersonContext, seed: u64, cfg: TruthWarpConfig) -> Result<TruthWarp> {
    let canvas = person.spec.canvas;
    let (h, w) = (canvas.height, canvas.width);
    let src: Vec<Point> = person
        .frame
        .torso_lattice()
        .into_iter()
        .map(|p| Point::new(p.x, p.y))
        .collect();
    let canonical: Vec<Point> = BodyFrame::new(&PersonSpec::canonical(canvas))
        .torso_lattice()
        .into_iter()
        .map(|p| Point::new(p.x, p.y))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = cfg.jitter * w as f64;
    let limit = cfg.max_displacement * w as f64;
    let mut last_reason = String::new();
    for _ in 0..cfg.retries.max(1) {
        let dst: Vec<Point> = if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("positive sigma");
            canonical
                .iter()
                .map(|p| Point::new(p.x + n.sample(&mut rng), p.y + n.sample(&mut rng)))
                .collect()
        } else {
            canonical.clone()
        };
        match try_warp(&src, &dst, &person.tryon_mask, h, w, limit, cfg.max_round_trip) {
            Ok(tw) => return Ok(tw),
            Err(reason) => last_reason = reason,
        }
    }
    Err(Error::Geometry(format!(
        "no admissible ground-truth warp after {} attempts: {last_reason}",
        cfg.retries
    )))
}

fn try_warp(
    src: &[Point],
    dst: &[Point],
    region: &Mask,
    h: usize,
    w: usize,
    limit: f64,
    round_trip: f32,
) -> std::result::Result<TruthWarp, String> {
    let tps = Tps::fit(src, dst).map_err(|e| e.to_string())?;
    let det = tps.min_jacobian_det(h, w);
    if det <= 0.0 {
        return Err(format!("fold-over (min Jacobian determinant {det:.3})"));
    }
    let forward = tps.flow(h, w);
    let mut worst = 0.0f32;
    for y in 0..h {
        for x in 0..w {
            if region.get(y, x, 0) >= 0.5 {
                let (dx, dy) = forward.at(y, x);
                worst = worst.max((dx * dx + dy * dy).sqrt());
            }
        }
    }
    if worst as f64 > limit {
        return Err(format!("displacement {worst:.2}px exceeds {limit:.2}px"));
    }
    let inverse = tps.inverse_flow(h, w).map_err(|e| e.to_string())?;
    forward.validate().map_err(|e| e.to_string())?;
    inverse.validate().map_err(|e| e.to_string())?;
    let tw = TruthWarp {
        forward,
        inverse,
        src: src.to_vec(),
        dst: dst.to_vec(),
    };
    let r = tw.round_trip_residual();
    if r > round_trip {
        return Err(format!("sampled inverse round trip off by {r:.2}px"));
    }
    Ok(tw)
}

impl TruthWarp {
    /// Largest `|inverse ∘ forward|` over interior pixels: at least two pixels
    /// from the border and mapped at least one pixel inside the canvas.
    pub fn round_trip_residual(&self) -> f32 {
        let (h, w) = self.forward.resolution();
        let comp = compose_flows(&self.inverse, &self.forward).expect("equal resolutions");
        let mut worst = 0.0f32;
        for y in 2..h.saturating_sub(2) {
            for x in 2..w.saturating_sub(2) {
                let (fx, fy) = self.forward.at(y, x);
                let (tx, ty) = (x as f32 + fx, y as f32 + fy);
                if tx < 1.0 || ty < 1.0 || tx > (w - 2) as f32 || ty > (h - 2) as f32 {
                    continue;
                }
                let (dx, dy) = comp.at(y, x);
                worst = worst.max((dx * dx + dy * dy).sqrt());
            }
        }
        worst
    }
}

/// Builds a truth warp from explicit control displacements (tests and tooling).
pub fn truth_warp_from_points(src: &[Point], dst: &[Point], h: usize, w: usize) -> Result<TruthWarp> {
    let tps = Tps::fit(src, dst)?;
    Ok(TruthWarp {
        forward: tps.flow(h, w),
        inverse: tps.inverse_flow(h, w)?,
        src: src.to_vec(),
        dst: dst.to_vec(),
    })
}
