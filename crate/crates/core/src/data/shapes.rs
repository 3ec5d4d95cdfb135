//! Analytic rasterization of the parametric shape families.
//!
//! Dataset classes and occluder silhouettes come from two disjoint sets so
//! that object-type occluders can never leak label information.

/// Shape families available as dataset classes, in class-index order.
pub const CLASS_SHAPES: [ClassShape; 8] = [
    ClassShape::Disk,
    ClassShape::Square,
    ClassShape::Triangle,
    ClassShape::Cross,
    ClassShape::Ring,
    ClassShape::Diamond,
    ClassShape::Bars,
    ClassShape::XShape,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassShape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Bars,
    XShape,
}

impl ClassShape {
    pub fn name(&self) -> &'static str {
        match self {
            ClassShape::Disk => "disk",
            ClassShape::Square => "square",
            ClassShape::Triangle => "triangle",
            ClassShape::Cross => "cross",
            ClassShape::Ring => "ring",
            ClassShape::Diamond => "diamond",
            ClassShape::Bars => "bars",
            ClassShape::XShape => "xshape",
        }
    }
}

/// Occluder silhouettes; disjoint from [`CLASS_SHAPES`] by construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OccluderShape {
    Star,
    Tee,
    Crescent,
}

pub const OCCLUDER_SHAPES: [OccluderShape; 3] =
    [OccluderShape::Star, OccluderShape::Tee, OccluderShape::Crescent];

/// Rasterize a class shape into a boolean mask over a `size x size` grid.
/// `cx`, `cy` are the center and `r` the characteristic radius, in pixels.
pub fn class_mask(shape: ClassShape, size: usize, cx: f64, cy: f64, r: f64) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5) - cx;
            let dy = (y as f64 + 0.5) - cy;
            mask[y * size + x] = inside_class(shape, dx, dy, r);
        }
    }
    mask
}

fn inside_class(shape: ClassShape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        ClassShape::Disk => dx * dx + dy * dy <= r * r,
        ClassShape::Square => dx.abs().max(dy.abs()) <= r * 0.88,
        ClassShape::Triangle => {
            // Equilateral, apex up: vertices (0,-r), (+-0.866r, +0.5r).
            let (ax, ay) = (0.0, -r);
            let (bx, by) = (0.866 * r, 0.5 * r);
            let (cx2, cy2) = (-0.866 * r, 0.5 * r);
            let sign = |x1: f64, y1: f64, x2: f64, y2: f64| (dx - x2) * (y1 - y2) - (x1 - x2) * (dy - y2);
            let d1 = sign(ax, ay, bx, by);
            let d2 = sign(bx, by, cx2, cy2);
            let d3 = sign(cx2, cy2, ax, ay);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
        ClassShape::Cross => {
            (dx.abs() <= r * 0.33 && dy.abs() <= r) || (dy.abs() <= r * 0.33 && dx.abs() <= r)
        }
        ClassShape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        ClassShape::Diamond => dx.abs() + dy.abs() <= r * 1.2,
        ClassShape::Bars => {
            dx.abs() <= r && ((dy - 0.55 * r).abs() <= 0.25 * r || (dy + 0.55 * r).abs() <= 0.25 * r)
        }
        ClassShape::XShape => {
            let lim = dx.abs().max(dy.abs()) <= r;
            let on_diag = (dx - dy).abs() <= 0.45 * r || (dx + dy).abs() <= 0.45 * r;
            lim && on_diag
        }
    }
}

/// Rasterize an occluder silhouette into an `h x w` mask filling most of the
/// bounding box. Star uses even-odd point-in-polygon; the others are analytic.
pub fn occluder_mask(shape: OccluderShape, h: usize, w: usize) -> Vec<bool> {
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    let r = 0.5 * (h.min(w) as f64);
    let mut mask = vec![false; h * w];
    let star = if shape == OccluderShape::Star {
        Some(star_polygon(cx, cy, r))
    } else {
        None
    };
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let dx = px - cx;
            let dy = py - cy;
            let inside = match shape {
                OccluderShape::Star => point_in_polygon(px, py, star.as_ref().expect("star verts")),
                OccluderShape::Tee => {
                    let stem = dx.abs() <= 0.24 * r && dy >= -r && dy <= r;
                    let bar = (dy + 0.68 * r).abs() <= 0.32 * r && dx.abs() <= r;
                    stem || bar
                }
                OccluderShape::Crescent => {
                    let in_outer = dx * dx + dy * dy <= r * r;
                    let hx = dx - 0.45 * r;
                    let in_inner = hx * hx + dy * dy <= (0.78 * r) * (0.78 * r);
                    in_outer && !in_inner
                }
            };
            mask[y * w + x] = inside;
        }
    }
    mask
}

fn star_polygon(cx: f64, cy: f64, r: f64) -> Vec<(f64, f64)> {
    let mut verts = Vec::with_capacity(10);
    for i in 0..10 {
        let angle = std::f64::consts::PI * (i as f64 / 5.0) - std::f64::consts::FRAC_PI_2;
        let radius = if i % 2 == 0 { r } else { 0.45 * r };
        verts.push((cx + radius * angle.cos(), cy + radius * angle.sin()));
    }
    verts
}

fn point_in_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Connectivity check used by tests and the occluder contract: 4-neighbour
/// flood fill from the first set pixel must reach every set pixel.
pub fn mask_is_connected(mask: &[bool], h: usize, w: usize) -> bool {
    let total: usize = mask.iter().filter(|m| **m).count();
    if total == 0 {
        return false;
    }
    let start = mask.iter().position(|m| *m).expect("non-empty");
    let mut seen = vec![false; mask.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut reached = 0;
    while let Some(idx) = stack.pop() {
        reached += 1;
        let (y, x) = (idx / w, idx % w);
        let mut push = |ny: usize, nx: usize| {
            let n = ny * w + nx;
            if mask[n] && !seen[n] {
                seen[n] = true;
                stack.push(n);
            }
        };
        if y > 0 {
            push(y - 1, x);
        }
        if y + 1 < h {
            push(y + 1, x);
        }
        if x > 0 {
            push(y, x - 1);
        }
        if x + 1 < w {
            push(y, x + 1);
        }
    }
    reached == total
}
