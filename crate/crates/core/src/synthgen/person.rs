use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::shapes::{Shape, Vec2};
use super::Canvas;
use crate::error::{Error, Result};
use crate::image::{Mask, Raster};

/// Shoulder line of the canonical body, as a fraction of canvas height.
pub const CANONICAL_SHOULDER_Y: f64 = 0.27;
/// Shoulder-to-hip distance of the canonical body, fraction of canvas height.
pub const CANONICAL_TORSO_HEIGHT: f64 = 0.40;
/// Shoulder width of the canonical body, fraction of canvas width.
pub const CANONICAL_SHOULDER_WIDTH: f64 = 0.50;

pub const MAX_LEAN_DEG: f64 = 15.0;
pub const BACKGROUND: [f32; 3] = [0.92, 0.92, 0.90];
pub const POSE_CHANNELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    /// Fraction of canvas width.
    pub shoulder_width: f64,
    /// Fraction of canvas height.
    pub torso_height: f64,
    /// Degrees, positive leans clockwise on screen.
    pub lean_deg: f64,
    pub skin_tone: [f32; 3],
    pub seed: u64,
    pub canvas: Canvas,
}

impl PersonSpec {
    pub fn canonical(canvas: Canvas) -> Self {
        Self {
            shoulder_width: CANONICAL_SHOULDER_WIDTH,
            torso_height: CANONICAL_TORSO_HEIGHT,
            lean_deg: 0.0,
            skin_tone: [0.85, 0.66, 0.55],
            seed: 0,
            canvas,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.canvas.validate()?;
        if !(-MAX_LEAN_DEG..=MAX_LEAN_DEG).contains(&self.lean_deg) {
            return Err(Error::ParameterRange(format!("lean {}° outside ±{MAX_LEAN_DEG}°", self.lean_deg)));
        }
        if self.skin_tone.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::ParameterRange("skin tone outside [0, 1]".into()));
        }
        if self.shoulder_width <= 0.0 || self.torso_height <= 0.0 {
            return Err(Error::ParameterRange("body dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Body layout in canvas pixels, before the lean rotation.
#[derive(Debug, Clone)]
pub struct BodyFrame {
    pub cx: f64,
    pub shoulder_y: f64,
    pub hip_y: f64,
    pub shoulder_half: f64,
    pub hip_half: f64,
    pub lean: f64,
    pub canvas: Canvas,
}

impl BodyFrame {
    pub fn new(spec: &PersonSpec) -> Self {
        let (h, w) = (spec.canvas.height as f64, spec.canvas.width as f64);
        let shoulder_y = CANONICAL_SHOULDER_Y * h;
        let shoulder_half = spec.shoulder_width * w / 2.0;
        Self {
            cx: (w - 1.0) / 2.0,
            shoulder_y,
            hip_y: shoulder_y + spec.torso_height * h,
            shoulder_half,
            hip_half: 0.84 * shoulder_half,
            lean: spec.lean_deg.to_radians(),
            canvas: spec.canvas,
        }
    }

    pub fn pivot(&self) -> Vec2 {
        Vec2::new(self.cx, self.hip_y)
    }

    /// Maps a point of the upright body onto the canvas.
    pub fn place(&self, p: Vec2) -> Vec2 {
        p.rotate_about(self.pivot(), self.lean)
    }

    /// Maps a canvas point back into the upright body frame.
    pub fn unplace(&self, p: Vec2) -> Vec2 {
        p.rotate_about(self.pivot(), -self.lean)
    }

    fn w(&self) -> f64 {
        self.canvas.width as f64
    }

    fn h(&self) -> f64 {
        self.canvas.height as f64
    }

    pub fn torso(&self) -> Shape {
        let (cx, ys, yh) = (self.cx, self.shoulder_y, self.hip_y);
        Shape::Polygon(vec![
            Vec2::new(cx - self.shoulder_half, ys),
            Vec2::new(cx + self.shoulder_half, ys),
            Vec2::new(cx + self.hip_half, yh),
            Vec2::new(cx - self.hip_half, yh),
        ])
    }

    pub fn head(&self) -> Shape {
        Shape::Circle {
            center: self.head_center(),
            radius: 0.105 * self.w(),
        }
    }

    fn head_center(&self) -> Vec2 {
        Vec2::new(self.cx, self.shoulder_y - 0.125 * self.h())
    }

    pub fn neck(&self) -> Shape {
        let half = 0.065 * self.w();
        let top = self.head_center().y;
        let bottom = self.shoulder_y + 1.0;
        Shape::Polygon(vec![
            Vec2::new(self.cx - half, top),
            Vec2::new(self.cx + half, top),
            Vec2::new(self.cx + half, bottom),
            Vec2::new(self.cx - half, bottom),
        ])
    }

    /// `side` is -1 for the left of the image, +1 for the right.
    pub fn arm(&self, side: f64) -> Shape {
        let (a, b) = self.arm_ends(side);
        Shape::Capsule {
            a,
            b,
            radius: 0.055 * self.w(),
        }
    }

    fn arm_ends(&self, side: f64) -> (Vec2, Vec2) {
        let w = self.w();
        (
            Vec2::new(self.cx + side * (self.shoulder_half - 0.03 * w), self.shoulder_y + 0.035 * self.h()),
            Vec2::new(self.cx + side * (self.shoulder_half + 0.06 * w), self.shoulder_y + 0.40 * self.h()),
        )
    }

    pub fn leg(&self, side: f64) -> Shape {
        let w = self.w();
        Shape::Capsule {
            a: Vec2::new(self.cx + side * 0.5 * self.hip_half, self.hip_y - 0.02 * self.h()),
            b: Vec2::new(self.cx + side * 0.55 * self.hip_half, self.h() - 2.0 - 0.1 * w),
            radius: 0.1 * w,
        }
    }

    pub fn skin_parts(&self) -> Vec<Shape> {
        vec![self.head(), self.neck(), self.arm(-1.0), self.arm(1.0), self.torso()]
    }

    pub fn leg_parts(&self) -> Vec<Shape> {
        vec![self.leg(-1.0), self.leg(1.0)]
    }

    /// Named keypoints on the canvas: head, neck, shoulders, hands, hips.
    pub fn keypoints(&self) -> [Vec2; POSE_CHANNELS] {
        let (la, lh) = self.arm_ends(-1.0);
        let (ra, rh) = self.arm_ends(1.0);
        let pts = [
            self.head_center(),
            Vec2::new(self.cx, self.shoulder_y - 0.02 * self.h()),
            la,
            ra,
            lh,
            rh,
            Vec2::new(self.cx - self.hip_half, self.hip_y),
            Vec2::new(self.cx + self.hip_half, self.hip_y),
        ];
        pts.map(|p| self.place(p))
    }

    /// 3×3 control lattice spanning the torso (rows: near shoulders, waist,
    /// near hips), placed on the canvas.
    pub fn torso_lattice(&self) -> Vec<Vec2> {
        let mut pts = Vec::with_capacity(9);
        for t in [0.1, 0.5, 0.9] {
            let y = self.shoulder_y + t * (self.hip_y - self.shoulder_y);
            let half = self.shoulder_half + t * (self.hip_half - self.shoulder_half);
            for c in [-0.6, 0.0, 0.6] {
                pts.push(self.place(Vec2::new(self.cx + c * half, y)));
            }
        }
        pts
    }

    fn check_inside_canvas(&self) -> Result<()> {
        let (h, w) = (self.h(), self.w());
        for shape in self.skin_parts().into_iter().chain(self.leg_parts()) {
            for p in shape.outline() {
                let q = self.place(p);
                if q.x < 0.0 || q.y < 0.0 || q.x > w - 1.0 || q.y > h - 1.0 {
                    return Err(Error::Geometry(format!(
                        "silhouette leaves the {}x{} canvas at ({:.1}, {:.1})",
                        self.canvas.height, self.canvas.width, q.x, q.y
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything about a person the rest of the pipeline needs.
#[derive(Debug, Clone)]
pub struct PersonContext {
    pub spec: PersonSpec,
    pub frame: BodyFrame,
    pub image: Raster,
    pub body_mask: Mask,
    /// Try-on region: torso and arms, dilated by one pixel, minus the head.
    pub tryon_mask: Mask,
    pub pose_map: Raster,
}

/// Renders the bare person, its silhouette mask and soft keypoint heatmaps.
pub fn gen_person(spec: &PersonSpec) -> Result<(Raster, Mask, Raster)> {
    let ctx = person_context(spec)?;
    Ok((ctx.image, ctx.body_mask, ctx.pose_map))
}

pub fn person_context(spec: &PersonSpec) -> Result<PersonContext> {
    spec.validate()?;
    let frame = BodyFrame::new(spec);
    frame.check_inside_canvas()?;
    let (h, w) = (spec.canvas.height, spec.canvas.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pants = [
        0.1 + 0.25 * rng.random::<f32>(),
        0.12 + 0.2 * rng.random::<f32>(),
        0.3 + 0.3 * rng.random::<f32>(),
    ];
    let hair = [0.15 + 0.2 * rng.random::<f32>(), 0.1 + 0.1 * rng.random::<f32>(), 0.05];

    let skin = frame.skin_parts();
    let legs = frame.leg_parts();
    let head = frame.head();
    let head_center_y = frame.shoulder_y - 0.125 * h as f64;
    let torso = frame.torso();
    let arms = [frame.arm(-1.0), frame.arm(1.0)];

    let mut image = Raster::zeros(h, w, 3);
    let mut body = Raster::zeros(h, w, 1);
    let mut region = Raster::zeros(h, w, 1);
    let mut head_mask = Raster::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let q = frame.unplace(Vec2::new(x as f64, y as f64));
            let color = if skin.iter().any(|s| s.contains(q)) {
                body.set(y, x, 0, 1.0);
                if head.contains(q) {
                    head_mask.set(y, x, 0, 1.0);
                    if q.y < head_center_y - 0.02 * h as f64 {
                        hair
                    } else {
                        spec.skin_tone
                    }
                } else {
                    spec.skin_tone
                }
            } else if legs.iter().any(|s| s.contains(q)) {
                body.set(y, x, 0, 1.0);
                pants
            } else {
                BACKGROUND
            };
            if torso.contains(q) || arms.iter().any(|a| a.contains(q)) {
                region.set(y, x, 0, 1.0);
            }
            for (c, v) in color.iter().enumerate() {
                image.set(y, x, c, *v);
            }
        }
    }
    let dilated = dilate(&region, 1);
    let tryon_mask = Raster::mask_from_fn(h, w, |y, x| dilated.get(y, x, 0) == 1.0 && head_mask.get(y, x, 0) == 0.0);

    let sigma = 0.04 * w as f64;
    let kps = frame.keypoints();
    let mut pose = Raster::zeros(h, w, POSE_CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let mut vals = [0f64; POSE_CHANNELS];
            for (k, p) in kps.iter().enumerate() {
                let d2 = (x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2);
                vals[k] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
            let total: f64 = vals.iter().sum();
            let norm = if total > 1.0 { total } else { 1.0 };
            for (k, v) in vals.iter().enumerate() {
                pose.set(y, x, k, (v / norm) as f32);
            }
        }
    }

    Ok(PersonContext {
        spec: spec.clone(),
        frame,
        image,
        body_mask: body,
        tryon_mask,
        pose_map: pose,
    })
}

/// Binary dilation with a square structuring element of radius `r`.
pub fn dilate(mask: &Mask, r: usize) -> Mask {
    let (h, w) = (mask.height, mask.width);
    Raster::mask_from_fn(h, w, |y, x| {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| mask.get(yy, xx, 0) >= 0.5))
    })
}

/// Binary erosion with a square structuring element of radius `r`; pixels
/// within `r` of the border are cleared.
pub fn erode(mask: &Mask, r: usize) -> Mask {
    let (h, w) = (mask.height, mask.width);
    Raster::mask_from_fn(h, w, |y, x| {
        if y < r || x < r || y + r >= h || x + r >= w {
            return false;
        }
        (y - r..=y + r).all(|yy| (x - r..=x + r).all(|xx| mask.get(yy, xx, 0) >= 0.5))
    })
}

/// Number of 4-connected components of a mask.
pub fn connected_components(mask: &Mask) -> usize {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if seen[start] || mask.data[start] < 0.5 {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && mask.data[j] >= 0.5 {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(lean: f64) -> PersonSpec {
        PersonSpec {
            lean_deg: lean,
            ..PersonSpec::canonical(Canvas::new(64, 48))
        }
    }

    fn mirror(m: &Mask) -> Mask {
        Raster::from_fn(m.height, m.width, 1, |y, x, _| m.get(y, m.width - 1 - x, 0))
    }

    /// Largest distance from a set pixel of `a` to the nearest set pixel of `b`, in pixels (Chebyshev).
    fn max_offset(a: &Mask, b: &Mask) -> usize {
        let mut worst = 0;
        for y in 0..a.height {
            for x in 0..a.width {
                if a.get(y, x, 0) < 0.5 {
                    continue;
                }
                let mut r = 0;
                while !(y.saturating_sub(r)..=(y + r).min(a.height - 1))
                    .any(|yy| (x.saturating_sub(r)..=(x + r).min(a.width - 1)).any(|xx| b.get(yy, xx, 0) >= 0.5))
                {
                    r += 1;
                }
                worst = worst.max(r);
            }
        }
        worst
    }

    #[test]
    fn upright_body_is_symmetric() {
        let (_, m, _) = gen_person(&spec(0.0)).unwrap();
        let mm = mirror(&m);
        assert!(max_offset(&m, &mm) <= 1 && max_offset(&mm, &m) <= 1);
    }

    #[test]
    fn opposite_leans_mirror_each_other() {
        let (_, a, _) = gen_person(&spec(10.0)).unwrap();
        let (_, b, _) = gen_person(&spec(-10.0)).unwrap();
        let bm = mirror(&b);
        assert!(max_offset(&a, &bm) <= 1 && max_offset(&bm, &a) <= 1);
        assert_ne!(a, b);
    }

    #[test]
    fn deterministic_and_connected() {
        let s = spec(4.0);
        let a = gen_person(&s).unwrap();
        assert_eq!(a, gen_person(&s).unwrap());
        assert_eq!(connected_components(&a.1), 1);
    }

    #[test]
    fn pose_channels_sum_to_at_most_one() {
        let (_, _, pose) = gen_person(&spec(-6.0)).unwrap();
        assert_eq!(pose.channels, POSE_CHANNELS);
        for y in 0..pose.height {
            for x in 0..pose.width {
                let s: f32 = pose.pixel(y, x).iter().sum();
                assert!(s <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn oversized_body_is_a_geometry_error() {
        let big = PersonSpec {
            shoulder_width: 0.95,
            ..spec(0.0)
        };
        assert!(matches!(gen_person(&big), Err(Error::Geometry(_))));
        assert!(matches!(gen_person(&spec(20.0)), Err(Error::ParameterRange(_))));
    }

    #[test]
    fn tryon_region_lies_on_the_body_neighbourhood() {
        let ctx = person_context(&spec(3.0)).unwrap();
        let grown = dilate(&ctx.body_mask, 1);
        for i in 0..ctx.tryon_mask.data.len() {
            if ctx.tryon_mask.data[i] == 1.0 {
                assert_eq!(grown.data[i], 1.0);
            }
        }
        assert!(ctx.tryon_mask.mask_area() > 300);
    }
}
