//! Procedural object geometry and its photo / sketch rasterizations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Modality};

const ELLIPSE_VERTICES: usize = 48;
const ARC_VERTICES: usize = 24;
const SUPERSAMPLE: usize = 4;
/// Outline pieces are cut to about this many pixels before styling.
const PIECE_PX: f64 = 1.5;
/// Pieces per dropout unit.
const DROPOUT_RUN: usize = 4;

type Pt = (f64, f64);

/// A filled primitive in unit-square coordinates (`y` grows downwards).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, rotation: f64 },
    Polygon { points: Vec<Pt> },
    /// Annular sector between two radii.
    Arc { cx: f64, cy: f64, r_inner: f64, r_outer: f64, start: f64, sweep: f64 },
}

impl Primitive {
    /// Closed outline, counter-clockwise or clockwise.
    pub fn outline(&self) -> Vec<Pt> {
        match self {
            Primitive::Ellipse { cx, cy, rx, ry, rotation } => {
                let (s, c) = rotation.sin_cos();
                (0..ELLIPSE_VERTICES)
                    .map(|i| {
                        let t = i as f64 / ELLIPSE_VERTICES as f64 * std::f64::consts::TAU;
                        let (x, y) = (rx * t.cos(), ry * t.sin());
                        (cx + c * x - s * y, cy + s * x + c * y)
                    })
                    .collect()
            }
            Primitive::Polygon { points } => points.clone(),
            Primitive::Arc { cx, cy, r_inner, r_outer, start, sweep } => {
                let at = |r: f64, i: usize| {
                    let t = start + sweep * i as f64 / (ARC_VERTICES - 1) as f64;
                    (cx + r * t.cos(), cy + r * t.sin())
                };
                let mut pts: Vec<Pt> = (0..ARC_VERTICES).map(|i| at(*r_outer, i)).collect();
                pts.extend((0..ARC_VERTICES).rev().map(|i| at(*r_inner, i)));
                pts
            }
        }
    }
}

fn area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

fn contains(poly: &[Pt], p: Pt) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Composite object: primitives painted in order, each with a gray shade in `(-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub parts: Vec<(Primitive, f64)>,
}

impl Geometry {
    fn outlines(&self) -> Result<Vec<Vec<Pt>>> {
        self.parts
            .iter()
            .enumerate()
            .map(|(i, (p, _))| {
                let o = p.outline();
                if o.len() < 3 || area(&o) < 1e-9 {
                    Err(Error::Contract(format!("primitive {i} has zero area")))
                } else {
                    Ok(o)
                }
            })
            .collect()
    }
}

/// Drawing habits of one synthetic sketcher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    /// Pixels.
    pub stroke_width: f64,
    /// Standard deviation of per-vertex displacement, pixels.
    pub jitter: f64,
    /// 0 keeps corners sharp, 1 rounds them fully.
    pub corner_rounding: f64,
    /// Horizontal shear, degrees.
    pub slant: f64,
    /// Fraction of outline runs omitted.
    pub dropout: f64,
}

impl StyleParams {
    pub fn clean() -> Self {
        Self { stroke_width: 1.5, jitter: 0.0, corner_rounding: 0.0, slant: 0.0, dropout: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.5..=6.0).contains(&self.stroke_width)
            && (0.0..=3.0).contains(&self.jitter)
            && (0.0..=1.0).contains(&self.corner_rounding)
            && (-30.0..=30.0).contains(&self.slant)
            && (0.0..=0.5).contains(&self.dropout);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("style parameters out of range: {self:?}")))
        }
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            stroke_width: rng.random_range(1.0..3.0),
            jitter: rng.random_range(0.0..1.2),
            corner_rounding: rng.random_range(0.0..1.0),
            slant: rng.random_range(-15.0..15.0),
            dropout: rng.random_range(0.0..0.3),
        }
    }
}

pub fn render_photo(geom: &Geometry, size: usize) -> Result<ImageTensor> {
    let outlines = geom.outlines()?;
    let ss = SUPERSAMPLE;
    let inv = 1.0 / (size * ss) as f64;
    let mut data = vec![0f32; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut acc = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let p = (((px * ss + sx) as f64 + 0.5) * inv, ((py * ss + sy) as f64 + 0.5) * inv);
                    let mut v = -1.0;
                    for (o, (_, shade)) in outlines.iter().zip(&geom.parts) {
                        if contains(o, p) {
                            v = *shade;
                        }
                    }
                    acc += v;
                }
            }
            data[py * size + px] = (acc / (ss * ss) as f64).clamp(-1.0, 1.0) as f32;
        }
    }
    ImageTensor::new(1, size, Modality::Photo, data)
}

/// Corner cutting; `amount` in `[0, 1]` sets how far along each edge the cut lands.
fn round_corners(poly: &[Pt], amount: f64) -> Vec<Pt> {
    if amount <= 0.0 {
        return poly.to_vec();
    }
    let q = 0.25 * amount;
    let mut cur = poly.to_vec();
    for _ in 0..2 {
        let n = cur.len();
        let mut next = Vec::with_capacity(2 * n);
        for i in 0..n {
            let (a, b) = (cur[i], cur[(i + 1) % n]);
            next.push((a.0 + q * (b.0 - a.0), a.1 + q * (b.1 - a.1)));
            next.push((b.0 - q * (b.0 - a.0), b.1 - q * (b.1 - a.1)));
        }
        cur = next;
    }
    cur
}

/// Cut the closed outline into short pieces, in pixel coordinates.
fn pieces(poly: &[Pt], size: f64) -> Vec<(Pt, Pt)> {
    let n = poly.len();
    let mut out = Vec::new();
    for i in 0..n {
        let a = (poly[i].0 * size, poly[i].1 * size);
        let b = (poly[(i + 1) % n].0 * size, poly[(i + 1) % n].1 * size);
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let k = (len / PIECE_PX).ceil().max(1.0) as usize;
        for j in 0..k {
            let t0 = j as f64 / k as f64;
            let t1 = (j + 1) as f64 / k as f64;
            out.push((
                (a.0 + t0 * (b.0 - a.0), a.1 + t0 * (b.1 - a.1)),
                (a.0 + t1 * (b.0 - a.0), a.1 + t1 * (b.1 - a.1)),
            ));
        }
    }
    out
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let l2 = dx * dx + dy * dy;
    let t = if l2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / l2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Outline drawing of the visible silhouette edges, white strokes on black.
pub fn render_sketch<R: Rng>(geom: &Geometry, style: &StyleParams, size: usize, rng: &mut R) -> Result<ImageTensor> {
    style.validate()?;
    let outlines = geom.outlines()?;
    let sz = size as f64;
    let shear = style.slant.to_radians().tan();
    let jitter = Normal::new(0.0, style.jitter.max(1e-12)).expect("positive std");
    let mut strokes: Vec<(Pt, Pt)> = Vec::new();
    for (i, outline) in outlines.iter().enumerate() {
        let occluders = &outlines[i + 1..];
        let visible = |p: Pt| !occluders.iter().any(|o| contains(o, (p.0 / sz, p.1 / sz)));
        let rounded = round_corners(outline, style.corner_rounding);
        let ps = pieces(&rounded, sz);
        // One displacement per piece start so consecutive pieces stay connected.
        let offsets: Vec<Pt> = ps
            .iter()
            .map(|_| {
                if style.jitter > 0.0 {
                    (jitter.sample(rng), jitter.sample(rng))
                } else {
                    (0.0, 0.0)
                }
            })
            .collect();
        let runs = ps.len().div_ceil(DROPOUT_RUN);
        let dropped: Vec<bool> = (0..runs).map(|_| rng.random::<f64>() < style.dropout).collect();
        let warp = |p: Pt, o: Pt| (p.0 + o.0 + shear * (p.1 - sz / 2.0), p.1 + o.1);
        for (j, &(a, b)) in ps.iter().enumerate() {
            let mid = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
            if dropped[j / DROPOUT_RUN] || !visible(mid) {
                continue;
            }
            let next = offsets[(j + 1) % ps.len()];
            strokes.push((warp(a, offsets[j]), warp(b, next)));
        }
    }
    let half = style.stroke_width / 2.0;
    let mut coverage = vec![0f64; size * size];
    for &(a, b) in &strokes {
        let reach = half + 1.0;
        let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(size);
        let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = seg_dist((x as f64 + 0.5, y as f64 + 0.5), a, b);
                let c = (half + 0.5 - d).clamp(0.0, 1.0);
                let cell = &mut coverage[y * size + x];
                *cell = cell.max(c);
            }
        }
    }
    let data = coverage.iter().map(|c| (2.0 * c - 1.0) as f32).collect();
    ImageTensor::new(1, size, Modality::Sketch, data)
}

fn random_primitive<R: Rng>(rng: &mut R) -> Primitive {
    let cx = rng.random_range(0.3..0.7);
    let cy = rng.random_range(0.3..0.7);
    match rng.random_range(0..3) {
        0 => Primitive::Ellipse {
            cx,
            cy,
            rx: rng.random_range(0.1..0.3),
            ry: rng.random_range(0.08..0.25),
            rotation: rng.random_range(0.0..std::f64::consts::PI),
        },
        1 => {
            let n = rng.random_range(3..7);
            let r = rng.random_range(0.12..0.3);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let points = (0..n)
                .map(|i| {
                    let t = phase + i as f64 / n as f64 * std::f64::consts::TAU;
                    let rr = r * rng.random_range(0.75..1.0);
                    (cx + rr * t.cos(), cy + rr * t.sin())
                })
                .collect();
            Primitive::Polygon { points }
        }
        _ => {
            let r_outer = rng.random_range(0.15..0.32);
            Primitive::Arc {
                cx,
                cy,
                r_inner: r_outer * rng.random_range(0.4..0.75),
                r_outer,
                start: rng.random_range(0.0..std::f64::consts::TAU),
                sweep: rng.random_range(1.5..4.5),
            }
        }
    }
}

/// The layout shared by every instance of a category.
pub fn category_template<R: Rng>(rng: &mut R) -> Geometry {
    let n = rng.random_range(2..=5);
    let parts = (0..n).map(|i| (random_primitive(rng), if i == 0 { 1.0 } else { 0.0 })).collect();
    Geometry { parts }
}

fn perturb(p: &Primitive, dx: f64, dy: f64, scale: f64, rot: f64) -> Primitive {
    match p {
        Primitive::Ellipse { cx, cy, rx, ry, rotation } => Primitive::Ellipse {
            cx: cx + dx,
            cy: cy + dy,
            rx: rx * scale,
            ry: ry / scale.sqrt(),
            rotation: rotation + rot,
        },
        Primitive::Polygon { points } => {
            let n = points.len() as f64;
            let c = points.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
            let (s, co) = rot.sin_cos();
            Primitive::Polygon {
                points: points
                    .iter()
                    .map(|p| {
                        let (x, y) = ((p.0 - c.0) * scale, (p.1 - c.1) * scale);
                        (c.0 + dx + co * x - s * y, c.1 + dy + s * x + co * y)
                    })
                    .collect(),
            }
        }
        Primitive::Arc { cx, cy, r_inner, r_outer, start, sweep } => Primitive::Arc {
            cx: cx + dx,
            cy: cy + dy,
            r_inner: r_inner * scale,
            r_outer: r_outer * scale,
            start: start + rot,
            sweep: *sweep,
        },
    }
}

/// An instance: the category layout with each primitive moved, scaled, turned and re-shaded.
pub fn instance_geometry<R: Rng>(template: &Geometry, rng: &mut R) -> Geometry {
    let parts = template
        .parts
        .iter()
        .enumerate()
        .map(|(i, (p, _))| {
            let q = perturb(
                p,
                rng.random_range(-0.08..0.08),
                rng.random_range(-0.08..0.08),
                rng.random_range(0.7..1.3),
                rng.random_range(-0.5..0.5),
            );
            let shade = if i == 0 { 1.0 } else { rng.random_range(-0.6..0.6) };
            (q, shade)
        })
        .collect();
    Geometry { parts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(lo: f64, hi: f64) -> Primitive {
        Primitive::Polygon { points: vec![(lo, lo), (hi, lo), (hi, hi), (lo, hi)] }
    }

    #[test]
    fn full_canvas_rectangle_fills_everything() {
        let g = Geometry { parts: vec![(square(0.0, 1.0), 1.0)] };
        let img = render_photo(&g, 16).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_geometry_is_background() {
        let img = render_photo(&Geometry { parts: vec![] }, 16).unwrap();
        assert!(img.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn zero_area_is_rejected() {
        let g = Geometry { parts: vec![(Primitive::Polygon { points: vec![(0.1, 0.1), (0.5, 0.5), (0.9, 0.9)] }, 1.0)] };
        assert!(render_photo(&g, 16).is_err());
        assert!(render_sketch(&g, &StyleParams::clean(), 16, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn clean_sketch_traces_the_silhouette() {
        let g = Geometry { parts: vec![(square(0.25, 0.75), 1.0)] };
        let size = 32;
        let photo = render_photo(&g, size).unwrap();
        let sketch = render_sketch(&g, &StyleParams::clean(), size, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // Every lit sketch pixel is within two pixels of a photo boundary.
        let fg = |x: isize, y: isize| {
            x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size && photo.data()[y as usize * size + x as usize] > 0.0
        };
        let mut lit = 0;
        for y in 0..size as isize {
            for x in 0..size as isize {
                if sketch.data()[y as usize * size + x as usize] > 0.0 {
                    lit += 1;
                    let near_edge = (-2..=2)
                        .flat_map(|dy| (-2..=2).map(move |dx| (dx, dy)))
                        .any(|(dx, dy)| fg(x + dx, y + dy) != fg(x, y));
                    assert!(near_edge, "stroke pixel ({x},{y}) far from the silhouette");
                }
            }
        }
        // Perimeter of a 16-pixel square.
        assert!(lit >= 60, "only {lit} stroke pixels");
    }

    #[test]
    fn occluded_edges_are_hidden() {
        let g = Geometry { parts: vec![(square(0.2, 0.6), 1.0), (square(0.1, 0.9), 0.0)] };
        let sketch = render_sketch(&g, &StyleParams::clean(), 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // The inner square is covered: its edge at x≈0.4·32 must not be drawn.
        let row = 13;
        assert!(sketch.data()[row * 32 + 19] < 0.0);
    }

    #[test]
    fn styles_differ_and_rendering_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = category_template(&mut rng);
        let g = instance_geometry(&t, &mut rng);
        let a = StyleParams::random(&mut rng);
        let b = StyleParams::random(&mut rng);
        let r = |s: &StyleParams| render_sketch(&g, s, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(r(&a), r(&a));
        let l2: f32 = r(&a).data().iter().zip(r(&b).data()).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(l2 > 0.0);
        assert_eq!(render_photo(&g, 64).unwrap(), render_photo(&g, 64).unwrap());
    }
}
