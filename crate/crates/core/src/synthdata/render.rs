//! Rasterization. Geometry tests take pixel-space points; a pixel `(x, y)`
//! is sampled at its centre `(x + 0.5, y + 0.5)` for masks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Background, Domain, SceneObject, SceneSpec, ShapeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Background,
    Object(usize),
}

fn star_vertices(cx: f32, cy: f32, r: f32) -> [(f32, f32); 10] {
    let mut v = [(0.0, 0.0); 10];
    for (i, slot) in v.iter_mut().enumerate() {
        let rad = if i % 2 == 0 { r } else { r * 0.45 };
        let a = -std::f32::consts::FRAC_PI_2 + i as f32 * std::f32::consts::PI / 5.0;
        *slot = (cx + rad * a.cos(), cy + rad * a.sin());
    }
    v
}

fn in_polygon(poly: &[(f32, f32)], x: f32, y: f32) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn point_in_shape(o: &SceneObject, x: f32, y: f32) -> bool {
    let (cx, cy) = o.center;
    let (dx, dy) = (x - cx, y - cy);
    let r = o.radius;
    match o.shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        ShapeKind::Triangle => {
            let h = 3f32.sqrt() / 2.0 * r;
            let tri = [(cx, cy - r), (cx + h, cy + r / 2.0), (cx - h, cy + r / 2.0)];
            in_polygon(&tri, x, y)
        }
        ShapeKind::Star => in_polygon(&star_vertices(cx, cy, r), x, y),
        ShapeKind::Cross => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// Full (unoccluded) pixel-centre mask of one object.
pub fn shape_mask(o: &SceneObject, height: usize, width: usize) -> Vec<bool> {
    let mut m = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            m[y * width + x] = point_in_shape(o, x as f32 + 0.5, y as f32 + 0.5);
        }
    }
    m
}

/// Fraction of the object's area (pixel-centre count on an unbounded grid)
/// that falls inside the canvas.
pub fn inside_fraction(o: &SceneObject, height: usize, width: usize) -> f32 {
    let r = o.radius.ceil() as i64 + 1;
    let (cx, cy) = (o.center.0.floor() as i64, o.center.1.floor() as i64);
    let (mut total, mut inside) = (0usize, 0usize);
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            if point_in_shape(o, x as f32 + 0.5, y as f32 + 0.5) {
                total += 1;
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    inside += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f32 / total as f32
    }
}

/// Topmost owner of every pixel centre.
pub fn owner_map(spec: &SceneSpec) -> Vec<Owner> {
    let (h, w) = (spec.height, spec.width);
    let mut owners = vec![Owner::Background; h * w];
    for (i, o) in spec.objects.iter().enumerate() {
        for (p, m) in shape_mask(o, h, w).into_iter().enumerate() {
            if m {
                owners[p] = Owner::Object(i);
            }
        }
    }
    owners
}

fn background_rgb(bg: Background, domain: Domain, x: f32, y: f32, height: usize) -> [f32; 3] {
    match (bg, domain) {
        (Background::SkyGradient, Domain::A) => {
            let t = y / height as f32;
            [0.52 + 0.38 * t, 0.72 + 0.23 * t, 0.95 + 0.05 * t]
        }
        (Background::SkyGradient, Domain::B) => [0.55, 0.80, 1.0],
        (Background::StripedFloor, d) => {
            let stripe = (y as usize / 4) % 2 == 0;
            match (d, stripe) {
                (Domain::A, true) => [0.64, 0.50, 0.36],
                (Domain::A, false) => [0.54, 0.41, 0.29],
                (Domain::B, true) => [0.80, 0.55, 0.30],
                (Domain::B, false) => [0.62, 0.40, 0.20],
            }
        }
        (Background::DottedWall, d) => {
            let (gx, gy) = (x % 8.0 - 4.0, y % 8.0 - 4.0);
            let dot = gx * gx + gy * gy <= 2.25;
            match (d, dot) {
                (Domain::A, false) => [0.76, 0.75, 0.71],
                (Domain::A, true) => [0.52, 0.51, 0.48],
                (Domain::B, false) => [0.85, 0.85, 0.85],
                (Domain::B, true) => [0.35, 0.35, 0.35],
            }
        }
    }
}

/// Chebyshev erosion by `k` pixels (outside-canvas counts as outside).
fn erode(mask: &[bool], h: usize, w: usize, k: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let mut keep = true;
            'n: for yy in y as i64 - k as i64..=y as i64 + k as i64 {
                for xx in x as i64 - k as i64..=x as i64 + k as i64 {
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 || !mask[yy as usize * w + xx as usize] {
                        keep = false;
                        break 'n;
                    }
                }
            }
            out[y * w + x] = keep;
        }
    }
    out
}

const SUPERSAMPLE: usize = 4;
const TEXTURE_NOISE: f64 = 0.025;

/// Renders `spec` into `H x W x 3` floats in `[0, 1]`.
pub fn render<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let mut img = vec![0f32; h * w * 3];
    match spec.domain {
        Domain::A => {
            let step = 1.0 / SUPERSAMPLE as f32;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = [0f32; 3];
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let px = x as f32 + (sx as f32 + 0.5) * step;
                            let py = y as f32 + (sy as f32 + 0.5) * step;
                            let top = spec.objects.iter().rev().find(|o| point_in_shape(o, px, py));
                            let c = match top {
                                Some(o) => o.color.rgb(),
                                None => background_rgb(spec.background, Domain::A, px, py, h),
                            };
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                    }
                    let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
                    for k in 0..3 {
                        img[(y * w + x) * 3 + k] = acc[k] / n;
                    }
                }
            }
            let noise = Normal::new(0.0, TEXTURE_NOISE).unwrap();
            for v in img.iter_mut() {
                *v = (*v + noise.sample(rng) as f32).clamp(0.0, 1.0);
            }
        }
        Domain::B => {
            let owners = owner_map(spec);
            let outlines: Vec<Vec<bool>> = spec
                .objects
                .iter()
                .map(|o| {
                    let m = shape_mask(o, h, w);
                    let inner = erode(&m, h, w, 2);
                    m.iter().zip(&inner).map(|(a, b)| *a && !*b).collect()
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let c = match owners[p] {
                        Owner::Object(i) if outlines[i][p] => [0.0, 0.0, 0.0],
                        Owner::Object(i) => spec.objects[i].color.rgb(),
                        Owner::Background => {
                            background_rgb(spec.background, Domain::B, x as f32 + 0.5, y as f32 + 0.5, h)
                        }
                    };
                    img[p * 3..p * 3 + 3].copy_from_slice(&c);
                }
            }
        }
    }
    img
}
