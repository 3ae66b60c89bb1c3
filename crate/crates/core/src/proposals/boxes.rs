use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) || !(x1 < x2 && y1 < y2) {
            return Err(Error::validation("box", format!("invalid box [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clips to `[0, width] x [0, height]`; `None` if a side drops below `min_side`.
    pub fn clip(&self, width: f64, height: f64, min_side: f64) -> Option<Self> {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(0.0, width);
        let y2 = self.y2.clamp(0.0, height);
        if x2 - x1 < min_side || y2 - y1 < min_side {
            return None;
        }
        Some(Self { x1, y1, x2, y2 })
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Centre/size box-delta parameterisation with per-component weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    /// Upper bound on the log-size deltas before exponentiation.
    pub clamp: f64,
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self {
            weights: [1.0; 4],
            clamp: (1000.0f64 / 16.0).ln(),
        }
    }
}

impl BoxCoder {
    pub fn with_weights(weights: [f64; 4]) -> Self {
        Self {
            weights,
            ..Default::default()
        }
    }

    pub fn encode(&self, anchor: &BBox, target: &BBox) -> [f64; 4] {
        let (ax, ay) = anchor.center();
        let (tx, ty) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - ax) / anchor.width(),
            wy * (ty - ay) / anchor.height(),
            ww * (target.width() / anchor.width()).ln(),
            wh * (target.height() / anchor.height()).ln(),
        ]
    }

    /// Unclipped decode; returns raw `[x1, y1, x2, y2]`.
    pub fn decode(&self, anchor: &BBox, delta: &[f64; 4]) -> [f64; 4] {
        let (ax, ay) = anchor.center();
        let [wx, wy, ww, wh] = self.weights;
        let cx = ax + delta[0] / wx * anchor.width();
        let cy = ay + delta[1] / wy * anchor.height();
        let w = anchor.width() * (delta[2] / ww).min(self.clamp).exp();
        let h = anchor.height() * (delta[3] / wh).min(self.clamp).exp();
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
    }
}

/// Decoded boxes with the index of the anchor each came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decoded {
    pub boxes: Vec<BBox>,
    pub source: Vec<usize>,
    /// Indices whose clipped box had a side under one pixel.
    pub dropped: Vec<usize>,
}

pub fn decode_boxes(
    anchors: &[BBox],
    deltas: &[[f64; 4]],
    image_size: (usize, usize),
    coder: &BoxCoder,
) -> Result<Decoded> {
    if anchors.len() != deltas.len() {
        return Err(Error::Shape(format!(
            "{} anchors but {} deltas",
            anchors.len(),
            deltas.len()
        )));
    }
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Decoded::default();
    for (i, (a, d)) in anchors.iter().zip(deltas).enumerate() {
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("box delta {i}")));
        }
        let [x1, y1, x2, y2] = coder.decode(a, d);
        let clipped = BBox { x1, y1, x2, y2 }.clip(w, h, 1.0);
        match clipped {
            Some(b) => {
                out.boxes.push(b);
                out.source.push(i);
            }
            None => out.dropped.push(i),
        }
    }
    Ok(out)
}
