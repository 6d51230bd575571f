//! Rasterisation primitives: pixel centres are tested against analytic shapes.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Rotation by `angle` radians about `pivot` (y grows downwards, so a
    /// positive angle turns clockwise on screen).
    pub fn rotate_about(self, pivot: Vec2, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        let (dx, dy) = (self.x - pivot.x, self.y - pivot.y);
        Vec2::new(pivot.x + c * dx - s * dy, pivot.y + s * dx + c * dy)
    }
}

#[derive(Debug, Clone)]
pub enum Shape {
    Polygon(Vec<Vec2>),
    Circle { center: Vec2, radius: f64 },
    /// Segment swept by a disc.
    Capsule { a: Vec2, b: Vec2, radius: f64 },
}

impl Shape {
    pub fn contains(&self, p: Vec2) -> bool {
        match self {
            Shape::Polygon(pts) => point_in_polygon(pts, p),
            Shape::Circle { center, radius } => {
                (p.x - center.x).powi(2) + (p.y - center.y).powi(2) <= radius * radius
            }
            Shape::Capsule { a, b, radius } => segment_distance2(p, *a, *b) <= radius * radius,
        }
    }

    /// Points on the outline, used for canvas-containment checks.
    pub fn outline(&self) -> Vec<Vec2> {
        match self {
            Shape::Polygon(pts) => pts.clone(),
            Shape::Circle { center, radius } => circle_points(*center, *radius),
            Shape::Capsule { a, b, radius } => {
                let mut v = circle_points(*a, *radius);
                v.extend(circle_points(*b, *radius));
                v
            }
        }
    }
}

fn circle_points(c: Vec2, r: f64) -> Vec<Vec2> {
    (0..16)
        .map(|i| {
            let t = i as f64 * std::f64::consts::PI / 8.0;
            Vec2::new(c.x + r * t.cos(), c.y + r * t.sin())
        })
        .collect()
}

fn segment_distance2(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let (abx, aby) = (b.x - a.x, b.y - a.y);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.x + t * abx, a.y + t * aby);
    (p.x - qx).powi(2) + (p.y - qy).powi(2)
}

/// Even-odd ray casting.
pub fn point_in_polygon(pts: &[Vec2], p: Vec2) -> bool {
    let mut inside = false;
    let n = pts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (pts[i], pts[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}
