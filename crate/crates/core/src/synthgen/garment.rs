use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::glyphs;
use super::shapes::{Shape, Vec2};
use super::Canvas;
use crate::error::{Error, Result};
use crate::image::{Mask, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    Solid,
    Stripes,
    Checker,
    GlyphText,
    LogoPatch,
}

impl PatternKind {
    pub const ALL: [PatternKind; 5] = [
        PatternKind::Solid,
        PatternKind::Stripes,
        PatternKind::Checker,
        PatternKind::GlyphText,
        PatternKind::LogoPatch,
    ];

    /// Accepted parameter names and their closed ranges on a given canvas.
    ///
    /// - stripes: `width` in `[1, W]` pixels (vertical bands)
    /// - checker: `cell` in `[1, min(H, W)]` pixels
    /// - glyph-text: `count` in `[1, 6]`, optional `scale` in `[1, 3]` pixels per bitmap cell
    /// - logo-patch: `x`, `y` in `[0, 1]` (patch centre, canvas fractions), `size` in `[0.05, 0.5]` of W
    pub fn param_ranges(self, canvas: Canvas) -> Vec<(&'static str, f64, f64, bool)> {
        let (h, w) = (canvas.height as f64, canvas.width as f64);
        match self {
            PatternKind::Solid => vec![],
            PatternKind::Stripes => vec![("width", 1.0, w, true)],
            PatternKind::Checker => vec![("cell", 1.0, h.min(w), true)],
            PatternKind::GlyphText => vec![("count", 1.0, 6.0, true), ("scale", 1.0, 3.0, false)],
            PatternKind::LogoPatch => vec![("x", 0.0, 1.0, true), ("y", 0.0, 1.0, true), ("size", 0.05, 0.5, true)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub pattern_kind: PatternKind,
    pub base_color: [f32; 3],
    #[serde(default)]
    pub pattern_params: BTreeMap<String, f64>,
    pub canvas: Canvas,
}

impl GarmentSpec {
    pub fn solid(base_color: [f32; 3], canvas: Canvas) -> Self {
        Self {
            pattern_kind: PatternKind::Solid,
            base_color,
            pattern_params: BTreeMap::new(),
            canvas,
        }
    }

    pub fn with_param(mut self, kind: PatternKind, name: &str, value: f64) -> Self {
        self.pattern_kind = kind;
        self.pattern_params.insert(name.to_string(), value);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.canvas.validate()?;
        if self.base_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::ParameterRange(format!("base color {:?} outside [0, 1]", self.base_color)));
        }
        let ranges = self.pattern_kind.param_ranges(self.canvas);
        for key in self.pattern_params.keys() {
            if !ranges.iter().any(|(n, ..)| n == key) {
                return Err(Error::ParameterRange(format!(
                    "{:?} pattern does not take parameter `{key}`",
                    self.pattern_kind
                )));
            }
        }
        for (name, lo, hi, required) in ranges {
            match self.pattern_params.get(name) {
                Some(v) if !(lo..=hi).contains(v) => {
                    return Err(Error::ParameterRange(format!("{name} = {v} outside [{lo}, {hi}]")));
                }
                None if required => {
                    return Err(Error::ParameterRange(format!("missing pattern parameter `{name}`")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn param(&self, name: &str, default: f64) -> f64 {
        self.pattern_params.get(name).copied().unwrap_or(default)
    }
}

/// The flat garment outline in canvas coordinates: a short-sleeved shirt
/// aligned with the canonical torso.
pub fn garment_template(canvas: Canvas) -> Shape {
    let (h, w) = (canvas.height as f64, canvas.width as f64);
    let cx = (w - 1.0) / 2.0;
    let top = super::person::CANONICAL_SHOULDER_Y * h;
    let hem = top + super::person::CANONICAL_TORSO_HEIGHT * h;
    let half = |f: f64| f * w;
    let right = vec![
        Vec2::new(cx + half(0.08), top - 0.01 * h),
        Vec2::new(cx + half(0.25), top + 0.01 * h),
        Vec2::new(cx + half(0.33), top + 0.13 * h),
        Vec2::new(cx + half(0.27), top + 0.17 * h),
        Vec2::new(cx + half(0.21), top + 0.12 * h),
        Vec2::new(cx + half(0.21), hem),
    ];
    let mut pts: Vec<Vec2> = right.iter().rev().map(|p| Vec2::new(2.0 * cx - p.x, p.y)).collect();
    pts.reverse();
    // left side from neck to hem, then right side from hem to neck, closing at the V-neck
    let mut outline = pts;
    outline.extend(right.into_iter().rev());
    outline.push(Vec2::new(cx, top + 0.04 * h));
    Shape::Polygon(outline)
}

/// Rasterised template mask.
pub fn garment_mask(canvas: Canvas) -> Mask {
    let shape = garment_template(canvas);
    Raster::mask_from_fn(canvas.height, canvas.width, |y, x| shape.contains(Vec2::new(x as f64, y as f64)))
}

/// Renders a flat garment on a zero background together with its position mask.
pub fn gen_garment(spec: &GarmentSpec, seed: u64) -> Result<(Raster, Mask)> {
    spec.validate()?;
    let canvas = spec.canvas;
    let (h, w) = (canvas.height, canvas.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = spec.base_color;
    let mut secondary = [0f32; 3];
    for (s, b) in secondary.iter_mut().zip(base) {
        *s = (b + 0.35 + 0.3 * rng.random::<f32>()).rem_euclid(1.0);
    }
    let mask = garment_mask(canvas);
    let cx = (w as f64 - 1.0) / 2.0;
    let chest_y = (super::person::CANONICAL_SHOULDER_Y + 0.3 * super::person::CANONICAL_TORSO_HEIGHT) * h as f64;

    let inked: Box<dyn Fn(usize, usize) -> bool> = match spec.pattern_kind {
        PatternKind::Solid => Box::new(|_, _| false),
        PatternKind::Stripes => {
            let width = spec.param("width", 4.0);
            Box::new(move |_, x| ((x as f64 / width).floor() as i64) % 2 == 1)
        }
        PatternKind::Checker => {
            let cell = spec.param("cell", 8.0);
            Box::new(move |y, x| {
                (((y as f64 / cell).floor() + (x as f64 / cell).floor()) as i64) % 2 == 1
            })
        }
        PatternKind::GlyphText => {
            let count = spec.param("count", 3.0) as usize;
            let scale = spec.param("scale", 1.0).round().max(1.0) as usize;
            let letters: Vec<char> = (0..count)
                .map(|_| glyphs::letter(rng.random_range(0..glyphs::alphabet_len())))
                .collect();
            let advance = (glyphs::GLYPH_W + 1) * scale;
            let text_w = count * advance - scale;
            let x0 = (cx - text_w as f64 / 2.0).round() as isize;
            let y0 = (chest_y - (glyphs::GLYPH_H * scale) as f64 / 2.0).round() as isize;
            Box::new(move |y, x| {
                let (dy, dx) = (y as isize - y0, x as isize - x0);
                if dy < 0 || dx < 0 {
                    return false;
                }
                let (dy, dx) = (dy as usize / scale, dx as usize);
                let slot = dx / advance;
                let col = (dx % advance) / scale;
                slot < letters.len() && glyphs::inked(letters[slot], dy, col)
            })
        }
        PatternKind::LogoPatch => {
            let (px, py) = (spec.param("x", 0.5) * w as f64, spec.param("y", 0.4) * h as f64);
            let half = spec.param("size", 0.2) * w as f64 / 2.0;
            Box::new(move |y, x| (x as f64 - px).abs() <= half && (y as f64 - py).abs() <= half)
        }
    };

    let mut img = Raster::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x, 0) < 0.5 {
                continue;
            }
            let color = if inked(y, x) { secondary } else { base };
            for (c, v) in color.iter().enumerate() {
                img.set(y, x, c, *v);
            }
        }
    }
    Ok((img, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canvas() -> Canvas {
        Canvas::new(64, 48)
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = GarmentSpec::solid([0.2, 0.5, 0.7], canvas());
        assert_eq!(gen_garment(&spec, 7).unwrap(), gen_garment(&spec, 7).unwrap());
    }

    #[test]
    fn full_width_stripes_equal_solid() {
        let solid = GarmentSpec::solid([0.8, 0.1, 0.3], canvas());
        let stripes = solid.clone().with_param(PatternKind::Stripes, "width", 48.0);
        assert_eq!(gen_garment(&solid, 1).unwrap(), gen_garment(&stripes, 1).unwrap());
    }

    #[test]
    fn checker_mask_covers_the_template_exactly() {
        let spec = GarmentSpec::solid([0.5, 0.5, 0.5], canvas()).with_param(PatternKind::Checker, "cell", 8.0);
        let (img, m) = gen_garment(&spec, 3).unwrap();
        // independent count: rasterise the template polygon directly
        let shape = garment_template(canvas());
        let mut count = 0;
        for y in 0..64 {
            for x in 0..48 {
                if shape.contains(Vec2::new(x as f64, y as f64)) {
                    count += 1;
                }
            }
        }
        assert_eq!(m.mask_area(), count);
        assert!(count > 400 && count < 64 * 48 / 2, "template area {count}");
        assert!(m.is_binary());
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        // background is exactly zero
        for y in 0..64 {
            for x in 0..48 {
                if m.get(y, x, 0) == 0.0 {
                    assert_eq!(img.pixel(y, x), &[0.0, 0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn template_is_mirror_symmetric() {
        let m = garment_mask(canvas());
        for y in 0..64 {
            for x in 0..48 {
                assert_eq!(m.get(y, x, 0), m.get(y, 47 - x, 0), "asymmetry at ({y}, {x})");
            }
        }
    }

    #[test]
    fn parameter_ranges_are_enforced() {
        let base = GarmentSpec::solid([0.5, 0.5, 0.5], canvas());
        let bad = base.clone().with_param(PatternKind::Stripes, "width", 0.5);
        assert!(matches!(gen_garment(&bad, 0), Err(Error::ParameterRange(_))));
        let missing = GarmentSpec { pattern_kind: PatternKind::Checker, ..base.clone() };
        assert!(matches!(gen_garment(&missing, 0), Err(Error::ParameterRange(_))));
        let unknown = base.clone().with_param(PatternKind::Solid, "width", 3.0);
        assert!(matches!(gen_garment(&unknown, 0), Err(Error::ParameterRange(_))));
        let color = GarmentSpec::solid([1.5, 0.0, 0.0], canvas());
        assert!(matches!(gen_garment(&color, 0), Err(Error::ParameterRange(_))));
    }

    #[test]
    fn glyph_text_inks_some_pixels() {
        let spec = GarmentSpec::solid([0.9, 0.9, 0.9], canvas()).with_param(PatternKind::GlyphText, "count", 3.0);
        let (img, m) = gen_garment(&spec, 11).unwrap();
        let inked = (0..64 * 48)
            .filter(|i| m.data[*i] == 1.0 && img.data[3 * i] != 0.9)
            .count();
        assert!(inked > 10, "only {inked} glyph pixels");
    }
}
