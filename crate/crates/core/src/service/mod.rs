//! Inference surface shared by the HTTP service, the CLI and the C ABI.
//!
//! Everything that turns a request into a detection record lives in
//! [`Engine`]; the transports only decode, call it, and encode.

pub mod http;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::attention::Heatmap;
use crate::error::{Error, Result};
use crate::model::{Detection, Fusion, InferenceOptions, Model, Stage};
use crate::synthdata::archive::{decode_png, encode_png, read_archive};
use crate::synthdata::strokefile::StrokeRecord;
use crate::synthdata::{prepare_query, RgbImage, StrokeSketch};
use crate::training::{read_checkpoint, Checkpoint};

pub const DEFAULT_MAX_DETECTIONS: usize = 100;

fn default_max_detections() -> usize {
    DEFAULT_MAX_DETECTIONS
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
pub struct LocalizeRequest {
    /// Base64 PNG. Exactly one of `image` and `scene_id` must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<String>,
    #[serde(default)]
    pub sketches: Vec<StrokeRecord>,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default = "default_max_detections")]
    pub max_detections: usize,
}

/// Row-major little-endian `f32` grid, base64 encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub data: String,
}

impl AttentionMap {
    pub fn from_heatmap(h: &Heatmap) -> Self {
        Self {
            height: h.height,
            width: h.width,
            dtype: "float32-le".into(),
            data: h.to_base64(),
        }
    }

    pub fn to_heatmap(&self) -> Result<Heatmap> {
        Heatmap::from_base64(self.height, self.width, &self.data)
    }
}

/// The deterministic part of a localization result. The CLI writes exactly
/// this; the service wraps it with timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub detections: Vec<Detection>,
    /// Absent for stage-1 models, which have no attention branch.
    pub attention_map: Option<AttentionMap>,
    pub model_digest: String,
}

impl DetectionRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes") + "\n"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizeResponse {
    #[serde(flatten)]
    pub record: DetectionRecord,
    pub timing_ms: f64,
}

/// Wire error: `{"error": {"code", "field"?, "message"}}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServiceError {
    pub status: u16,
    pub code: String,
    pub field: Option<String>,
    pub message: String,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
    message: &'a str,
}

impl ServiceError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status: 400,
            code: "validation_error".into(),
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn not_found(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status: 404,
            code: "not_found".into(),
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": ErrorBody {
                code: &self.code,
                field: self.field.as_deref(),
                message: &self.message,
            }
        })
    }
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{} ({field}): {}", self.code, self.message),
            None => write!(f, "{}: {}", self.code, self.message),
        }
    }
}

impl std::error::Error for ServiceError {}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Validation { field, message } => Self::validation(field, message),
            Error::NotDivisible { .. } => Self::validation("image", message),
            Error::Decode(_) => Self {
                status: 400,
                code: "decode_error".into(),
                field: Some("image".into()),
                message,
            },
            _ => Self {
                status: 500,
                code: "internal".into(),
                field: None,
                message,
            },
        }
    }
}

/// Scenes served by id, loaded from a scene archive directory.
#[derive(Clone, Debug, Default)]
pub struct Gallery {
    scenes: BTreeMap<String, RgbImage>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Base64 PNG at half resolution.
    pub thumbnail: String,
}

impl Gallery {
    pub fn load(dir: &Path) -> Result<Self> {
        let scenes = read_archive(dir)?
            .into_iter()
            .map(|s| (s.id, s.scene.image))
            .collect();
        Ok(Self { scenes })
    }

    pub fn from_images(images: impl IntoIterator<Item = (String, RgbImage)>) -> Self {
        Self {
            scenes: images.into_iter().collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&RgbImage> {
        self.scenes.get(id)
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn entries(&self) -> Result<Vec<GalleryEntry>> {
        self.scenes
            .iter()
            .map(|(id, img)| {
                Ok(GalleryEntry {
                    id: id.clone(),
                    width: img.width(),
                    height: img.height(),
                    thumbnail: STANDARD.encode(encode_png(&thumbnail(img))?),
                })
            })
            .collect()
    }
}

/// 2x2 box-filter downsample.
fn thumbnail(img: &RgbImage) -> RgbImage {
    let (w, h) = ((img.width() / 2).max(1), (img.height() / 2).max(1));
    let mut bytes = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    if sx < img.width() && sy < img.height() {
                        acc += img.get(sx, sy, c);
                        n += 1.0;
                    }
                }
                bytes.push((acc / n * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::from_rgb8(w, h, &bytes).expect("thumbnail dims")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub categories: Vec<String>,
    pub stage: u8,
    pub sketch_size: usize,
}

/// A frozen model plus everything needed to answer requests. Never mutated
/// after construction, so it can be shared across threads.
#[derive(Debug)]
pub struct Engine {
    model: Model<f32>,
    digest: String,
    categories: Vec<String>,
    gallery: Gallery,
    started: Instant,
}

impl Engine {
    pub fn new(model: Model<f32>, categories: Vec<String>, gallery: Gallery) -> Self {
        Self {
            digest: model.digest(),
            model,
            categories,
            gallery,
            started: Instant::now(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, gallery: Gallery) -> Result<Self> {
        let categories = ckpt.categories.clone();
        Ok(Self::new(ckpt.to_model()?, categories, gallery))
    }

    /// Loads a checkpoint file and, optionally, a gallery archive directory.
    pub fn open(ckpt: &Path, gallery: Option<&Path>) -> Result<Self> {
        let ckpt = read_checkpoint(ckpt)?;
        let gallery = match gallery {
            Some(dir) => Gallery::load(dir)?,
            None => Gallery::default(),
        };
        Self::from_checkpoint(ckpt, gallery)
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn stage(&self) -> Stage {
        self.model.stage()
    }

    pub fn gallery(&self) -> &Gallery {
        &self.gallery
    }

    pub fn uptime_s(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    pub fn categories(&self) -> CategoryInfo {
        CategoryInfo {
            categories: self.categories.clone(),
            stage: self.model.stage().number(),
            sketch_size: self.model.config().sketch_size,
        }
    }

    /// The single inference path behind every transport.
    pub fn localize_sketches(
        &self,
        image: &RgbImage,
        sketches: &[StrokeSketch],
        fusion: Fusion,
        max_detections: usize,
    ) -> Result<DetectionRecord> {
        if sketches.is_empty() {
            return Err(Error::validation("sketches", "at least one sketch is required"));
        }
        if max_detections == 0 {
            return Err(Error::validation("max_detections", "must be at least 1"));
        }
        let labels: Vec<&str> = sketches.iter().map(|s| s.category()).filter(|c| !c.is_empty()).collect();
        if labels.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::validation("sketches", "all labelled sketches must share one category"));
        }
        let size = self.model.config().sketch_size;
        let rasters = sketches
            .iter()
            .enumerate()
            .map(|(i, s)| prepare_query(s, size).map_err(|e| Error::validation(&format!("sketches[{i}]"), e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let opts = InferenceOptions {
            max_detections,
            ..InferenceOptions::default()
        };
        let loc = self.model.localize(image, &rasters, fusion, &opts)?;
        Ok(DetectionRecord {
            detections: loc.detections,
            attention_map: loc.heatmap.as_ref().map(AttentionMap::from_heatmap),
            model_digest: self.digest.clone(),
        })
    }

    pub fn localize(&self, req: &LocalizeRequest) -> std::result::Result<LocalizeResponse, ServiceError> {
        let t = Instant::now();
        let image = self.resolve_image(req)?;
        let sketches = decode_sketches(&req.sketches)?;
        let record = self.localize_sketches(&image, &sketches, req.fusion, req.max_detections)?;
        Ok(LocalizeResponse {
            record,
            timing_ms: t.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn resolve_image(&self, req: &LocalizeRequest) -> std::result::Result<RgbImage, ServiceError> {
        match (&req.image, &req.scene_id) {
            (Some(_), Some(_)) => Err(ServiceError::validation("image", "give either image or scene_id, not both")),
            (None, None) => Err(ServiceError::validation("image", "image or scene_id is required")),
            (Some(b64), None) => {
                let bytes = STANDARD
                    .decode(b64.trim())
                    .map_err(|e| ServiceError::from(Error::Decode(format!("base64: {e}"))))?;
                Ok(decode_png(&bytes)?)
            }
            (None, Some(id)) => self
                .gallery
                .get(id)
                .cloned()
                .ok_or_else(|| ServiceError::not_found("scene_id", format!("no gallery scene `{id}`"))),
        }
    }
}

/// Stroke records to sketches; an empty drawing is a validation error.
pub fn decode_sketches(records: &[StrokeRecord]) -> std::result::Result<Vec<StrokeSketch>, ServiceError> {
    if records.is_empty() {
        return Err(ServiceError::validation("sketches", "at least one sketch is required"));
    }
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let field = format!("sketches[{i}]");
            match r.clone().into_sketch() {
                Ok(Some(s)) => Ok(s),
                Ok(None) => Err(ServiceError::validation(field, "sketch has no strokes with extent")),
                Err(msg) => Err(ServiceError::validation(field, msg)),
            }
        })
        .collect()
}

/// Input image with the attention heatmap blended in red and detection
/// boxes outlined in green; same dimensions as the input.
pub fn render_overlay(image: &RgbImage, record: &DetectionRecord, max_boxes: usize) -> Result<RgbImage> {
    let (w, h) = (image.width(), image.height());
    let mut px = image.to_rgb8();
    if let Some(map) = &record.attention_map {
        let heat = map.to_heatmap()?;
        let (lo, hi) = heat
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for y in 0..h.min(heat.height) {
            for x in 0..w.min(heat.width) {
                let t = (heat.data[y * heat.width + x] - lo) / span;
                let i = (y * w + x) * 3;
                px[i] = (px[i] as f32 * (1.0 - 0.5 * t) + 255.0 * 0.5 * t).round() as u8;
                px[i + 1] = (px[i + 1] as f32 * (1.0 - 0.5 * t)).round() as u8;
                px[i + 2] = (px[i + 2] as f32 * (1.0 - 0.5 * t)).round() as u8;
            }
        }
    }
    for d in record.detections.iter().take(max_boxes) {
        let b = d.bbox;
        let x1 = (b.x1.floor().max(0.0) as usize).min(w - 1);
        let y1 = (b.y1.floor().max(0.0) as usize).min(h - 1);
        let x2 = ((b.x2.ceil() as usize).saturating_sub(1)).clamp(x1, w - 1);
        let y2 = ((b.y2.ceil() as usize).saturating_sub(1)).clamp(y1, h - 1);
        let mut put = |x: usize, y: usize| {
            let i = (y * w + x) * 3;
            px[i..i + 3].copy_from_slice(&[0, 255, 0]);
        };
        for x in x1..=x2 {
            put(x, y1);
            put(x, y2);
        }
        for y in y1..=y2 {
            put(x1, y);
            put(x2, y);
        }
    }
    RgbImage::from_rgb8(w, h, &px)
}

/// Service settings; every field can come from a JSON file, the environment
/// (`SKETCHLOC_HOST`, `SKETCHLOC_PORT`, `SKETCHLOC_CKPT`, `SKETCHLOC_GALLERY`)
/// or flags, later sources winning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub ckpt: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            ckpt: None,
            gallery: None,
        }
    }
}

impl ServeConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_vars(|k| std::env::var(k).ok())
    }

    pub fn apply_vars(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(h) = get("SKETCHLOC_HOST") {
            self.host = h;
        }
        if let Some(p) = get("SKETCHLOC_PORT") {
            self.port = p
                .parse()
                .map_err(|_| Error::Config(format!("SKETCHLOC_PORT `{p}` is not a port number")))?;
        }
        if let Some(c) = get("SKETCHLOC_CKPT") {
            self.ckpt = Some(c.into());
        }
        if let Some(g) = get("SKETCHLOC_GALLERY") {
            self.gallery = Some(g.into());
        }
        Ok(())
    }
}
