use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{fnv1a, known_categories, mix_seed, CATEGORIES};
use crate::error::{Error, Result};

/// `(x, y)` in normalised canvas coordinates.
pub type Point = (f64, f64);

/// A category-labelled line drawing made of polylines in `[0,1]^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct StrokeSketch {
    category: String,
    strokes: Vec<Vec<Point>>,
}

impl StrokeSketch {
    pub fn new(category: impl Into<String>, strokes: Vec<Vec<Point>>) -> Result<Self> {
        if strokes.is_empty() {
            return Err(Error::validation("strokes", "sketch has no strokes"));
        }
        for (i, s) in strokes.iter().enumerate() {
            if s.len() < 2 {
                return Err(Error::validation(
                    "strokes",
                    format!("stroke {i} has {} point(s), need at least 2", s.len()),
                ));
            }
            for &(x, y) in s {
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    return Err(Error::validation(
                        "strokes",
                        format!("stroke {i} has point ({x}, {y}) outside [0,1]^2"),
                    ));
                }
            }
        }
        Ok(Self {
            category: category.into(),
            strokes,
        })
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn strokes(&self) -> &[Vec<Point>] {
        &self.strokes
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.strokes.iter().flatten().copied()
    }

    /// Rescales uniformly so the larger bounding-box side spans `[0,1]`,
    /// aligned to the top-left corner. `None` when the sketch has zero extent.
    pub fn normalized(&self) -> Option<Self> {
        normalize_strokes(&self.strokes).map(|strokes| Self {
            category: self.category.clone(),
            strokes,
        })
    }
}

pub(crate) fn normalize_strokes(strokes: &[Vec<Point>]) -> Option<Vec<Vec<Point>>> {
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in strokes.iter().flatten() {
        min = (min.0.min(x), min.1.min(y));
        max = (max.0.max(x), max.1.max(y));
    }
    let extent = (max.0 - min.0).max(max.1 - min.1);
    if !(extent > 0.0) || !extent.is_finite() {
        return None;
    }
    Some(
        strokes
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&(x, y)| (((x - min.0) / extent).clamp(0.0, 1.0), ((y - min.1) / extent).clamp(0.0, 1.0)))
                    .collect()
            })
            .collect(),
    )
}

fn circle(cx: f64, cy: f64, r: f64, n: usize) -> Vec<Point> {
    (0..=n)
        .map(|i| {
            let t = -PI / 2.0 + 2.0 * PI * i as f64 / n as f64;
            (cx + r * t.cos(), cy + r * t.sin())
        })
        .collect()
}

/// Geometry shared by the crescent template and the crescent scene shape:
/// the inner (removed) disc is offset right by this fraction of the outer
/// radius and has this fraction of its radius.
pub(crate) const CRESCENT_OFFSET: f64 = 0.45;
pub(crate) const CRESCENT_INNER: f64 = 0.8;
pub(crate) const RING_INNER: f64 = 0.55;
pub(crate) const STAR_INNER: f64 = 0.4;
pub(crate) const CROSS_ARM: f64 = 0.33;

/// Star outline (10 vertices, first vertex pointing up) around the origin.
pub(crate) fn star_vertices(r: f64) -> Vec<Point> {
    (0..10)
        .map(|i| {
            let rad = if i % 2 == 0 { r } else { r * STAR_INNER };
            let t = -PI / 2.0 + PI * i as f64 / 5.0;
            (rad * t.cos(), rad * t.sin())
        })
        .collect()
}

/// The canonical, noise-free stroke template for `category`.
pub fn template(category: &str) -> Result<StrokeSketch> {
    let strokes: Vec<Vec<Point>> = match category {
        "disc" => vec![circle(0.5, 0.5, 0.45, 24)],
        "square" => vec![vec![(0.1, 0.1), (0.9, 0.1), (0.9, 0.9), (0.1, 0.9), (0.1, 0.1)]],
        "triangle" => vec![vec![(0.5, 0.05), (0.95, 0.9), (0.05, 0.9), (0.5, 0.05)]],
        "diamond" => vec![vec![(0.5, 0.05), (0.95, 0.5), (0.5, 0.95), (0.05, 0.5), (0.5, 0.05)]],
        "star" => {
            let mut s: Vec<Point> = star_vertices(0.45).into_iter().map(|(x, y)| (0.5 + x, 0.5 + y)).collect();
            s.push(s[0]);
            vec![s]
        }
        "cross" => {
            let (a, b) = (0.5 - 0.45 * CROSS_ARM, 0.5 + 0.45 * CROSS_ARM);
            let (lo, hi) = (0.05, 0.95);
            vec![vec![
                (a, lo),
                (b, lo),
                (b, a),
                (hi, a),
                (hi, b),
                (b, b),
                (b, hi),
                (a, hi),
                (a, b),
                (lo, b),
                (lo, a),
                (a, a),
                (a, lo),
            ]]
        }
        "ring" => vec![circle(0.5, 0.5, 0.45, 24), circle(0.5, 0.5, 0.45 * RING_INNER, 16)],
        "crescent" => {
            let r = 0.45;
            let (c0, c1) = ((0.5, 0.5), (0.5 + CRESCENT_OFFSET * r, 0.5));
            let r1 = CRESCENT_INNER * r;
            let n = 48;
            let outer: Vec<Point> = (0..=n)
                .map(|i| 2.0 * PI * i as f64 / n as f64)
                .map(|t| (c0.0 + r * t.cos(), c0.1 + r * t.sin()))
                .filter(|&(x, y)| (x - c1.0).hypot(y - c1.1) > r1)
                .collect();
            let inner: Vec<Point> = (0..=n)
                .map(|i| -PI + 2.0 * PI * i as f64 / n as f64)
                .map(|t| (c1.0 - r1 * t.cos(), c1.1 - r1 * t.sin()))
                .filter(|&(x, y)| (x - c0.0).hypot(y - c0.1) <= r)
                .collect();
            vec![outer, inner]
        }
        other => {
            return Err(Error::UnknownCategory {
                name: other.to_string(),
                known: known_categories(),
            })
        }
    };
    StrokeSketch::new(category, strokes)
}

/// A noisy hand-drawn-style sketch of `category`.
///
/// Jitter law, all magnitudes scaled by `noise`: a global affine warp about
/// the canvas centre (rotation up to 0.5 rad, per-axis shrink up to 40%,
/// translation up to 0.25), a Gaussian offset per stroke (sigma 0.08), a
/// Gaussian offset per point (sigma 0.08), and above noise 0.5 each stroke
/// is dropped with probability `noise - 0.5` (at least one survives).
/// Points are clamped to the canvas.
pub fn generate_sketch(seed: u64, category: &str, noise: f64) -> Result<StrokeSketch> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Config(format!("sketch noise {noise} outside [0,1]")));
    }
    let base = template(category)?;
    if noise == 0.0 {
        return Ok(base);
    }
    debug_assert!(CATEGORIES.contains(&category));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fnv1a(category.as_bytes())]));
    let theta = rng.random_range(-0.5..=0.5) * noise;
    let sx = 1.0 - rng.random_range(0.0..=0.4) * noise;
    let sy = 1.0 - rng.random_range(0.0..=0.4) * noise;
    let tx = rng.random_range(-0.25..=0.25) * noise;
    let ty = rng.random_range(-0.25..=0.25) * noise;
    let (sin, cos) = theta.sin_cos();
    let stroke_noise = Normal::new(0.0, 0.08 * noise).expect("finite sigma");
    let point_noise = Normal::new(0.0, 0.08 * noise).expect("finite sigma");

    let n_strokes = base.strokes.len();
    let mut keep: Vec<bool> = (0..n_strokes)
        .map(|_| !(noise > 0.5 && rng.random_bool((noise - 0.5).min(1.0))))
        .collect();
    if !keep.iter().any(|&k| k) {
        let i = rng.random_range(0..n_strokes);
        keep[i] = true;
    }

    let mut strokes = Vec::with_capacity(n_strokes);
    for (stroke, kept) in base.strokes.iter().zip(keep) {
        let ox = stroke_noise.sample(&mut rng);
        let oy = stroke_noise.sample(&mut rng);
        let pts: Vec<Point> = stroke
            .iter()
            .map(|&(x, y)| {
                let (dx, dy) = ((x - 0.5) * sx, (y - 0.5) * sy);
                let rx = 0.5 + dx * cos - dy * sin + tx + ox + point_noise.sample(&mut rng);
                let ry = 0.5 + dx * sin + dy * cos + ty + oy + point_noise.sample(&mut rng);
                (rx.clamp(0.0, 1.0), ry.clamp(0.0, 1.0))
            })
            .collect();
        if kept {
            strokes.push(pts);
        }
    }
    StrokeSketch::new(category, strokes)
}
