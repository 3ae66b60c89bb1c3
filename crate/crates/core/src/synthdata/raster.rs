use super::sketch::StrokeSketch;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::FeatureMap;

/// A square binary raster of a sketch.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterSketch {
    size: usize,
    pixels: Vec<f32>,
    category: String,
}

impl RasterSketch {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.size + x]
    }

    pub fn lit_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0.0).count()
    }

    pub fn to_feature_map<F: Real>(&self) -> FeatureMap<F> {
        FeatureMap::new(
            1,
            self.size,
            self.size,
            1,
            self.pixels.iter().map(|&p| F::c(p as f64)).collect(),
        )
        .expect("raster dims")
    }
}

/// Maps a normalised coordinate onto the inset canvas (10% margin per side).
fn to_pixel(v: f64, size: usize) -> i64 {
    let span = (size - 1) as f64;
    (0.1 * span + v * 0.8 * span).round() as i64
}

/// Integer line walk visiting every pixel of the segment exactly once.
pub(crate) fn line_pixels(x0: i64, y0: i64, x1: i64, y1: i64, mut plot: impl FnMut(i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        plot(x, y);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws every polyline segment as a one-pixel-wide line on a `size x size`
/// zero canvas. Output pixels are exactly 0 or 1.
pub fn rasterize_sketch(sketch: &StrokeSketch, size: usize) -> Result<RasterSketch> {
    if size < 8 {
        return Err(Error::Config(format!("raster size {size} below minimum 8")));
    }
    let mut pixels = vec![0.0f32; size * size];
    let s = size as i64;
    for stroke in sketch.strokes() {
        for seg in stroke.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            line_pixels(to_pixel(a.0, size), to_pixel(a.1, size), to_pixel(b.0, size), to_pixel(b.1, size), |x, y| {
                if (0..s).contains(&x) && (0..s).contains(&y) {
                    pixels[(y * s + x) as usize] = 1.0;
                }
            });
        }
    }
    Ok(RasterSketch {
        size,
        pixels,
        category: sketch.category().to_string(),
    })
}

/// The query pipeline shared by training and inference: rescale to the
/// stroke-file convention, then rasterize.
pub fn prepare_query(sketch: &StrokeSketch, size: usize) -> Result<RasterSketch> {
    let normalized = sketch
        .normalized()
        .ok_or_else(|| Error::validation("sketches", "sketch has zero extent"))?;
    rasterize_sketch(&normalized, size)
}
