use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sketch::{star_vertices, CRESCENT_INNER, CRESCENT_OFFSET, CROSS_ARM, RING_INNER};
use super::{known_categories, CATEGORIES};
use crate::error::{Error, Result};
use crate::proposals::{iou, BBox};
use crate::real::Real;
use crate::tensor::FeatureMap;

/// An RGB image stored row-major, channel-last, with values in `[0,1]`
/// that are exact multiples of 1/255.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if width == 0 || height == 0 || bytes.len() != width * height * 3 {
            return Err(Error::Decode(format!(
                "expected {} bytes for a {width}x{height} RGB image, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Channel-major copy for the image encoder.
    pub fn to_feature_map<F: Real>(&self) -> FeatureMap<F> {
        FeatureMap::from_fn(3, self.height, self.width, 1, |c, y, x| F::c(self.get(x, y, c) as f64))
    }
}

/// Parameters of one rendered shape: category, centre and outer radius in
/// pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInstance {
    pub category: String,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl ShapeInstance {
    /// Point-inclusion test in pixel space.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let r = self.radius;
        let (dx, dy) = (px - self.cx, py - self.cy);
        let d = dx.hypot(dy);
        match self.category.as_str() {
            "disc" => d <= r,
            "square" => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            "triangle" => {
                let v = [(0.0, -r), (r, 0.889 * r), (-r, 0.889 * r)];
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let (s0, s1, s2) = (side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0]));
                (s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0) || (s0 <= 0.0 && s1 <= 0.0 && s2 <= 0.0)
            }
            "diamond" => dx.abs() + dy.abs() <= r,
            "star" => point_in_polygon(&star_vertices(r), dx, dy),
            "cross" => {
                (dx.abs() <= CROSS_ARM * r && dy.abs() <= r) || (dy.abs() <= CROSS_ARM * r && dx.abs() <= r)
            }
            "ring" => d <= r && d >= RING_INNER * r,
            "crescent" => d <= r && (dx - CRESCENT_OFFSET * r).hypot(dy) > CRESCENT_INNER * r,
            _ => false,
        }
    }

    /// Pixels whose centre falls inside the shape, as `(x, y)`.
    pub fn support(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let x0 = (self.cx - self.radius - 1.0).floor().max(0.0) as usize;
        let y0 = (self.cy - self.radius - 1.0).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.radius + 1.0).ceil() as usize).min(width);
        let y1 = ((self.cy + self.radius + 1.0).ceil() as usize).min(height);
        let mut out = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
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

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub category: String,
    pub bbox: BBox,
    /// Rendering parameters; absent for scenes loaded from an archive.
    pub shape: Option<ShapeInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn categories(&self) -> BTreeSet<String> {
        self.objects.iter().map(|o| o.category.clone()).collect()
    }

    pub fn boxes_of(&self, category: &str) -> Vec<BBox> {
        self.objects.iter().filter(|o| o.category == category).map(|o| o.bbox).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape diameter range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub max_overlap_iou: f64,
    /// Allows object-free scenes.
    pub evaluation_mode: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_objects: 1,
            max_objects: 5,
            min_size: 16.0,
            max_size: 48.0,
            max_overlap_iou: 0.3,
            evaluation_mode: false,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range ({}, {}) is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.min_objects == 0 && !self.evaluation_mode {
            return Err(Error::Config("object count may only be 0 in evaluation mode".into()));
        }
        if !(self.min_size >= 4.0 && self.min_size <= self.max_size) {
            return Err(Error::Config(format!(
                "invalid size range ({}, {})",
                self.min_size, self.max_size
            )));
        }
        if self.max_size + 4.0 > self.width.min(self.height) as f64 {
            return Err(Error::Config("shapes do not fit in the image".into()));
        }
        Ok(())
    }
}

fn luma(c: [f32; 3]) -> f32 {
    (c[0] + c[1] + c[2]) / 3.0
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders a deterministic scene of parametric shapes over a textured
/// background. Boxes are the exact pixel support of each shape, with
/// exclusive right/bottom edges.
pub fn generate_scene(seed: u64, categories: &BTreeSet<String>, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    if categories.is_empty() {
        return Err(Error::Config("scene needs at least one category".into()));
    }
    for c in categories {
        if !CATEGORIES.contains(&c.as_str()) {
            return Err(Error::UnknownCategory {
                name: c.clone(),
                known: known_categories(),
            });
        }
    }
    let cats: Vec<&String> = categories.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);

    // background: grey base, channel tint, a low-frequency wave and grain
    let base: f32 = rng.random_range(0.25..0.75);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let (fx, fy): (f32, f32) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let mut data = vec![0.0f32; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let wave = 0.06 * (fx * x as f32 + fy * y as f32 + phase).sin();
            for c in 0..3 {
                let grain: f32 = rng.random_range(-0.04..0.04);
                data[(y * w + x) * 3 + c] = base + tint[c] + wave + grain;
            }
        }
    }

    let n_objects = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    let mut attempts = 0;
    while objects.len() < n_objects && attempts < 200 * n_objects.max(1) {
        attempts += 1;
        let category = cats[rng.random_range(0..cats.len())].clone();
        let radius = rng.random_range(cfg.min_size..=cfg.max_size) / 2.0;
        let cx = rng.random_range(radius + 1.0..=w as f64 - radius - 1.0);
        let cy = rng.random_range(radius + 1.0..=h as f64 - radius - 1.0);
        let shape = ShapeInstance {
            category: category.clone(),
            cx,
            cy,
            radius,
        };
        let support = shape.support(w, h);
        if support.is_empty() {
            continue;
        }
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &support {
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
        }
        let bbox = BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)?;
        if objects.iter().any(|o| iou(&o.bbox, &bbox) > cfg.max_overlap_iou) {
            continue;
        }
        let color = loop {
            let c: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            if (luma(c) - base).abs() >= 0.3 {
                break c;
            }
        };
        for &(x, y) in &support {
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = color[c];
            }
        }
        objects.push(SceneObject {
            category,
            bbox,
            shape: Some(shape),
        });
    }
    if objects.len() < cfg.min_objects {
        return Err(Error::Config(format!(
            "could only place {} of {} objects",
            objects.len(),
            cfg.min_objects
        )));
    }
    for v in &mut data {
        *v = quantize(*v);
    }
    Ok(Scene {
        image: RgbImage {
            width: w,
            height: h,
            data,
        },
        objects,
    })
}
