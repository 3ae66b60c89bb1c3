use super::boxes::BBox;
use crate::error::{Error, Result};

/// One set of anchors per feature cell, in `(row, col, scale, ratio)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<BBox>,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl AnchorGrid {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Anchors centred at `((col + 0.5) * stride, (row + 0.5) * stride)` with
/// width `scale * sqrt(ratio)` and height `scale / sqrt(ratio)`.
pub fn generate_anchors(
    width: usize,
    height: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Result<AnchorGrid> {
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
    }
    if scales.iter().chain(ratios).any(|v| !(*v > 0.0)) {
        return Err(Error::Config("anchor scales and ratios must be positive".into()));
    }
    let mut anchors = Vec::with_capacity(width * height * scales.len() * ratios.len());
    for row in 0..height {
        for col in 0..width {
            let cx = (col as f64 + 0.5) * stride as f64;
            let cy = (row as f64 + 0.5) * stride as f64;
            for &s in scales {
                for &r in ratios {
                    let q = r.sqrt();
                    anchors.push(BBox::from_center(cx, cy, s * q, s / q)?);
                }
            }
        }
    }
    Ok(AnchorGrid {
        anchors,
        width,
        height,
        stride,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
    })
}
