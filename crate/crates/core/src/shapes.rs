//! Parametric glyph rendering for the synthetic turntable dataset.
//!
//! Each category is a 2-d glyph built from a few primitives (simple
//! polygons, ellipses, annulus sectors). A record's view applies an
//! in-plane rotation followed by a vertical squash (the camera-elevation
//! analog), then rasterizes with 4x4 supersampling over a low-contrast
//! noise background. All trig goes through the portable kernels in
//! [`crate::rng`], so rendered bytes are identical across platforms.

use crate::rng::{portable_sincos, Rng};

/// Two disjoint glyph families. Transfer experiments pretrain on one and
/// fine-tune on the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeSet {
    A,
    B,
}

impl ShapeSet {
    pub const COUNT: usize = 10;

    pub fn label(self) -> &'static str {
        match self {
            ShapeSet::A => "a",
            ShapeSet::B => "b",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ShapeSet::A => 0,
            ShapeSet::B => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ShapeSet::A),
            1 => Some(ShapeSet::B),
            _ => None,
        }
    }
}

impl std::str::FromStr for ShapeSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(ShapeSet::A),
            "b" => Ok(ShapeSet::B),
            other => Err(format!("unknown shape set {other:?}; expected a or b")),
        }
    }
}

const TAU: f64 = std::f64::consts::TAU;

/// Nominal glyph radius as a fraction of the short image side.
const BASE_RADIUS_FRAC: f64 = 0.38;
/// Foreground intensity composited over the background.
const FG_LEVEL: f64 = 0.78;
/// Supersampling grid per pixel side.
const SS: usize = 4;
/// Instance jitter magnitudes.
const SCALE_JITTER: f64 = 0.22;
const THICK_JITTER: f64 = 0.3;
const VERTEX_SIGMA: f64 = 0.07;

enum Prim {
    /// Simple (non-self-intersecting) polygon, even-odd inside test.
    Poly(Vec<(f64, f64)>),
    Ellipse { rx: f64, ry: f64 },
    /// Annulus restricted to the angular range `[a0, a1]` (radians,
    /// counterclockwise, y up). A full ring uses the range `[0, TAU]`.
    Sector { r_in: f64, r_out: f64, a0: f64, a1: f64 },
}

impl Prim {
    fn inside(&self, x: f64, y: f64) -> bool {
        match self {
            Prim::Poly(pts) => {
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[j];
                    if (yi > y) != (yj > y) {
                        let t = (y - yi) / (yj - yi);
                        if x < xi + t * (xj - xi) {
                            inside = !inside;
                        }
                    }
                    j = i;
                }
                inside
            }
            Prim::Ellipse { rx, ry } => {
                let u = x / rx;
                let v = y / ry;
                u * u + v * v <= 1.0
            }
            Prim::Sector { r_in, r_out, a0, a1 } => {
                let r2 = x * x + y * y;
                if r2 < r_in * r_in || r2 > r_out * r_out {
                    return false;
                }
                let span = a1 - a0;
                if span >= TAU {
                    return true;
                }
                // Test against the boundary rays instead of computing an
                // angle; cross(u, p) >= 0 means p lies counterclockwise of u.
                let (s0, c0) = portable_sincos(*a0);
                let (s1, c1) = portable_sincos(*a1);
                let from_start = c0 * y - s0 * x >= 0.0;
                let to_end = x * s1 - y * c1 >= 0.0;
                if span <= std::f64::consts::PI {
                    from_start && to_end
                } else {
                    from_start || to_end
                }
            }
        }
    }
}

/// One jittered glyph instance in unit coordinates (y up), plus its
/// instance-specific scale factor.
pub struct ShapeGeom {
    prims: Vec<Prim>,
    scale: f64,
}

impl ShapeGeom {
    fn inside(&self, x: f64, y: f64) -> bool {
        self.prims.iter().any(|p| p.inside(x, y))
    }
}

/// Regular n-gon of radius 1, first vertex at `start` radians.
fn ngon(n: usize, start: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let (s, c) = portable_sincos(start + TAU * i as f64 / n as f64);
            (c, s)
        })
        .collect()
}

/// Star polygon alternating outer radius 1 and inner radius `r_in`.
fn star(points: usize, r_in: f64, start: f64) -> Vec<(f64, f64)> {
    (0..2 * points)
        .map(|i| {
            let r = if i % 2 == 0 { 1.0 } else { r_in };
            let (s, c) = portable_sincos(start + TAU * i as f64 / (2 * points) as f64);
            (r * c, r * s)
        })
        .collect()
}

const FRAC_PI_2: f64 = std::f64::consts::FRAC_PI_2;

fn base_prims(set: ShapeSet, category: usize, thick: f64) -> Vec<Prim> {
    match set {
        ShapeSet::A => match category {
            0 => vec![Prim::Poly(ngon(3, FRAC_PI_2))],
            1 => vec![Prim::Poly(ngon(4, FRAC_PI_2 / 2.0))],
            2 => vec![Prim::Poly(ngon(5, FRAC_PI_2))],
            3 => vec![Prim::Poly(star(5, 0.45 * thick, FRAC_PI_2))],
            4 => vec![Prim::Ellipse {
                rx: 1.0,
                ry: 0.55 * thick,
            }],
            5 => {
                // Plus sign with arm half-width a.
                let a = 0.22 * thick;
                vec![Prim::Poly(vec![
                    (a, a),
                    (a, 1.0),
                    (-a, 1.0),
                    (-a, a),
                    (-1.0, a),
                    (-1.0, -a),
                    (-a, -a),
                    (-a, -1.0),
                    (a, -1.0),
                    (a, -a),
                    (1.0, -a),
                    (1.0, a),
                ])]
            }
            6 => {
                // Arrow pointing along +x.
                let w = 0.22 * thick;
                vec![Prim::Poly(vec![
                    (1.0, 0.0),
                    (0.1, 0.55),
                    (0.1, w),
                    (-1.0, w),
                    (-1.0, -w),
                    (0.1, -w),
                    (0.1, -0.55),
                ])]
            }
            7 => {
                // T: top bar plus stem.
                let by = 1.0 - 0.45 * thick;
                let w = 0.22 * thick;
                vec![Prim::Poly(vec![
                    (-1.0, 1.0),
                    (1.0, 1.0),
                    (1.0, by),
                    (w, by),
                    (w, -1.0),
                    (-w, -1.0),
                    (-w, by),
                    (-1.0, by),
                ])]
            }
            8 => {
                // L: left bar plus bottom bar.
                let w = 0.45 * thick;
                vec![Prim::Poly(vec![
                    (-1.0, 1.0),
                    (-1.0 + w, 1.0),
                    (-1.0 + w, -1.0 + w),
                    (1.0, -1.0 + w),
                    (1.0, -1.0),
                    (-1.0, -1.0),
                ])]
            }
            _ => vec![Prim::Sector {
                r_in: 1.0 - 0.35 * thick,
                r_out: 1.0,
                a0: 0.0,
                a1: TAU,
            }],
        },
        ShapeSet::B => match category {
            0 => vec![Prim::Poly(ngon(6, FRAC_PI_2))],
            1 => vec![Prim::Poly(vec![
                (0.0, 1.0),
                (0.55, 0.0),
                (0.0, -1.0),
                (-0.55, 0.0),
            ])],
            2 => vec![Prim::Poly(star(4, 0.4 * thick, FRAC_PI_2))],
            3 => vec![Prim::Poly(vec![
                (-1.0, -0.7),
                (1.0, -0.7),
                (0.55, 0.7),
                (-0.55, 0.7),
            ])],
            4 => vec![Prim::Sector {
                r_in: 0.0,
                r_out: 1.0,
                a0: 0.0,
                a1: std::f64::consts::PI,
            }],
            5 => {
                // H: two uprights plus crossbar.
                let w = 0.3 * thick;
                let ch = 0.22 * thick;
                vec![Prim::Poly(vec![
                    (-1.0, 1.0),
                    (-1.0 + w, 1.0),
                    (-1.0 + w, ch),
                    (1.0 - w, ch),
                    (1.0 - w, 1.0),
                    (1.0, 1.0),
                    (1.0, -1.0),
                    (1.0 - w, -1.0),
                    (1.0 - w, -ch),
                    (-1.0 + w, -ch),
                    (-1.0 + w, -1.0),
                    (-1.0, -1.0),
                ])]
            }
            6 => {
                // U: two uprights plus bottom bar.
                let w = 0.38 * thick;
                vec![Prim::Poly(vec![
                    (-1.0, 1.0),
                    (-1.0 + w, 1.0),
                    (-1.0 + w, -1.0 + w),
                    (1.0 - w, -1.0 + w),
                    (1.0 - w, 1.0),
                    (1.0, 1.0),
                    (1.0, -1.0),
                    (-1.0, -1.0),
                ])]
            }
            7 => {
                // Z: two bars joined by a diagonal band.
                let t = 0.3 * thick;
                let dw = 0.55;
                vec![Prim::Poly(vec![
                    (-1.0, 1.0),
                    (1.0, 1.0),
                    (1.0, 1.0 - t),
                    (-1.0 + dw, -1.0 + t),
                    (1.0, -1.0 + t),
                    (1.0, -1.0),
                    (-1.0, -1.0),
                    (-1.0, -1.0 + t),
                    (1.0 - dw, 1.0 - t),
                    (-1.0, 1.0 - t),
                ])]
            }
            8 => vec![
                Prim::Poly(vec![(0.0, 0.0), (-1.0, 0.62), (-1.0, -0.62)]),
                Prim::Poly(vec![(0.0, 0.0), (1.0, 0.62), (1.0, -0.62)]),
            ],
            _ => vec![Prim::Sector {
                r_in: 1.0 - 0.4 * thick,
                r_out: 1.0,
                a0: 0.6,
                a1: TAU - 0.6,
            }],
        },
    }
}

/// Builds one glyph instance, drawing its jitter (scale, stroke thickness,
/// vertex noise) from `rng` in a fixed order.
pub fn build_shape(set: ShapeSet, category: usize, rng: &mut Rng) -> ShapeGeom {
    assert!(category < ShapeSet::COUNT, "category {category} out of range");
    let scale = 1.0 + SCALE_JITTER * (2.0 * rng.uniform() - 1.0);
    let thick = 1.0 + THICK_JITTER * (2.0 * rng.uniform() - 1.0);
    let mut prims = base_prims(set, category, thick);
    for prim in &mut prims {
        if let Prim::Poly(pts) = prim {
            for p in pts {
                p.0 += VERTEX_SIGMA * rng.normal();
                p.1 += VERTEX_SIGMA * rng.normal();
            }
        }
    }
    ShapeGeom { prims, scale }
}

/// View parameters for one record.
#[derive(Debug, Clone, Copy)]
pub struct View {
    /// In-plane rotation in radians.
    pub rotation: f64,
    /// Vertical squash factor in (0, 1].
    pub foreshorten: f64,
}

impl View {
    /// Maps a discrete pose cell to continuous view parameters: rotation by
    /// `2 pi r / n_rot`, squash by `0.35 + 0.65 a / (n_az - 1)`.
    pub fn from_pose(rot: usize, az: usize, n_rot: usize, n_az: usize) -> View {
        let rotation = TAU * rot as f64 / n_rot as f64;
        let foreshorten = if n_az <= 1 {
            1.0
        } else {
            0.35 + 0.65 * az as f64 / (n_az - 1) as f64
        };
        View {
            rotation,
            foreshorten,
        }
    }
}

/// Rasterizes a glyph over a background, returning `h * w` values in [0, 1].
///
/// The glyph is rotated, squashed vertically, scaled to the image, and
/// composited at `FG_LEVEL` with 4x4 supersampled coverage. `background`
/// must hold `h * w` values.
pub fn rasterize(geom: &ShapeGeom, h: usize, w: usize, view: View, background: &[f32]) -> Vec<f32> {
    assert_eq!(background.len(), h * w, "background size mismatch");
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    let px = BASE_RADIUS_FRAC * h.min(w) as f64 * geom.scale;
    let (s, c) = portable_sincos(view.rotation);
    let inv_f = 1.0 / view.foreshorten;
    let step = 1.0 / SS as f64;
    let mut out = Vec::with_capacity(h * w);
    for py in 0..h {
        for pxl in 0..w {
            let mut hits = 0u32;
            for sy in 0..SS {
                let y = py as f64 + (sy as f64 + 0.5) * step;
                let uy = (cy - y) / px * inv_f;
                for sx in 0..SS {
                    let x = pxl as f64 + (sx as f64 + 0.5) * step;
                    let ux = (x - cx) / px;
                    // Rotate by -rotation to reach glyph coordinates.
                    let qx = c * ux + s * uy;
                    let qy = -s * ux + c * uy;
                    if geom.inside(qx, qy) {
                        hits += 1;
                    }
                }
            }
            let alpha = hits as f64 / (SS * SS) as f64;
            let bg = background[py * w + pxl] as f64;
            let v = bg + alpha * (FG_LEVEL - bg);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Background noise-texture parameters.
const BG_LO: f64 = 0.2;
const BG_COARSE_AMP: f64 = 0.4;
const BG_FINE_AMP: f64 = 0.18;

/// Bilinear value noise in [0, 1] on a knot lattice with the given cell
/// size in pixels.
fn value_noise(h: usize, w: usize, cell: f64, rng: &mut Rng) -> Vec<f64> {
    let nx = (w as f64 / cell).ceil() as usize + 1;
    let ny = (h as f64 / cell).ceil() as usize + 1;
    let knots: Vec<f64> = (0..nx * ny).map(|_| rng.uniform()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = (y as f64 + 0.5) / cell;
        let y0 = (gy as usize).min(ny - 2);
        let fy = (gy - y0 as f64).clamp(0.0, 1.0);
        for x in 0..w {
            let gx = (x as f64 + 0.5) / cell;
            let x0 = (gx as usize).min(nx - 2);
            let fx = (gx - x0 as f64).clamp(0.0, 1.0);
            let k = |dy: usize, dx: usize| knots[(y0 + dy) * nx + (x0 + dx)];
            let top = k(0, 0) * (1.0 - fx) + k(0, 1) * fx;
            let bot = k(1, 0) * (1.0 - fx) + k(1, 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// One low-contrast background texture: a coarse value-noise field plus a
/// fine-grained octave, kept below the glyph intensity.
pub fn background_texture(h: usize, w: usize, rng: &mut Rng) -> Vec<f32> {
    let coarse = value_noise(h, w, 8.0, rng);
    let fine = value_noise(h, w, 2.0, rng);
    coarse
        .iter()
        .zip(fine.iter())
        .map(|(&a, &b)| {
            let v = BG_LO + BG_COARSE_AMP * a + BG_FINE_AMP * (b - 0.5);
            v.clamp(0.0, 1.0) as f32
        })
        .collect()
}
