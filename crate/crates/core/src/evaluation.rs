//! Detection metrics (all-point interpolated AP, IoU-averaged mAP) and the
//! seen/unseen, multi-query evaluation driver.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Detection, Fusion, InferenceOptions, Model};
use crate::proposals::{iou, BBox};
use crate::real::Real;
use crate::synthdata::{fnv1a, generate_sketch, mix_seed, prepare_query, CategorySplit, Scene};

/// IoU thresholds of the averaged metric: 0.50, 0.55, ..., 0.95.
pub fn map_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Average precision of one category.
///
/// `detections[i]` and `gts[i]` belong to the same image. Detections are
/// ranked by score (ties keep their flattened order) and each is matched to
/// the unmatched ground truth of its image with the highest IoU, if that IoU
/// reaches `iou_thresh`. The precision/recall curve is integrated with
/// all-point interpolation. `None` when there is no ground truth at all.
pub fn compute_ap(detections: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thresh: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut flat: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().map(move |d| (img, d)))
        .collect();
    flat.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(flat.len());
    for (img, d) in flat {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.get(img).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
            if matched[img][j] {
                continue;
            }
            let v = iou(&d.bbox, g);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                matched[img][j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    // precision envelope, then area under the step curve
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some(ap)
}

/// Mean of [`compute_ap`] over [`map_thresholds`].
pub fn compute_map(detections: &[Vec<Detection>], gts: &[Vec<BBox>]) -> Option<f64> {
    let aps: Option<Vec<f64>> = map_thresholds().iter().map(|&t| compute_ap(detections, gts, t)).collect();
    aps.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub tag: SplitTag,
    pub ap50: f64,
    pub map: f64,
    pub images: usize,
    pub instances: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub categories: Vec<String>,
    pub ap50: Option<f64>,
    pub map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_queries: usize,
    pub fusion: Fusion,
    /// Noise level of the generated query sketches.
    pub noise: f64,
    /// Seeds the query sketches.
    pub seed: u64,
    /// Evaluate only these categories (all categories of the split if empty).
    pub categories: Vec<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_queries: 1,
            fusion: Fusion::Feature,
            noise: 0.3,
            seed: 0,
            categories: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub fusion: Fusion,
    pub noise: f64,
    pub seed: u64,
    pub interpolation: String,
    pub map_convention: String,
    pub model_digest: String,
    pub model_stage: u8,
    pub per_category: BTreeMap<String, CategoryResult>,
    pub seen: Aggregate,
    pub unseen: Aggregate,
    pub all: Aggregate,
    pub warnings: Vec<String>,
}

fn aggregate(per: &BTreeMap<String, CategoryResult>, tag: Option<SplitTag>) -> Aggregate {
    let chosen: Vec<(&String, &CategoryResult)> = per.iter().filter(|(_, r)| tag.is_none_or(|t| r.tag == t)).collect();
    if chosen.is_empty() {
        return Aggregate::default();
    }
    let n = chosen.len() as f64;
    Aggregate {
        categories: chosen.iter().map(|(c, _)| (*c).clone()).collect(),
        ap50: Some(chosen.iter().map(|(_, r)| r.ap50).sum::<f64>() / n),
        map: Some(chosen.iter().map(|(_, r)| r.map).sum::<f64>() / n),
    }
}

/// Deterministic query sketches for one (image, category) pair.
pub fn query_sketches(
    seed: u64,
    image_index: usize,
    category: &str,
    n: usize,
    noise: f64,
    size: usize,
) -> Result<Vec<crate::synthdata::RasterSketch>> {
    (0..n)
        .map(|q| {
            let s = mix_seed(&[seed, image_index as u64, fnv1a(category.as_bytes()), q as u64]);
            prepare_query(&generate_sketch(s, category, noise)?, size)
        })
        .collect()
}

/// Runs localization for every (image, present category) pair and reports
/// per-category and split-level AP@50 and mAP. `trained_on` lists the
/// categories the model was trained with, for the overlap warning.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    scenes: &[Scene],
    split: &CategorySplit,
    trained_on: &[String],
    opts: &EvalOptions,
    inference: &InferenceOptions,
) -> Result<EvalReport> {
    if opts.n_queries == 0 {
        return Err(Error::validation("n_queries", "must be at least 1"));
    }
    let wanted: BTreeSet<String> = if opts.categories.is_empty() {
        split.all()
    } else {
        opts.categories.iter().cloned().collect()
    };
    let mut warnings = Vec::new();
    let overlap: Vec<&String> = trained_on.iter().filter(|c| split.unseen.contains(*c) && wanted.contains(*c)).collect();
    if !overlap.is_empty() {
        warnings.push(format!(
            "model was trained on evaluated unseen categories: {}",
            overlap.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ));
    }
    let mut per_category = BTreeMap::new();
    for cat in &wanted {
        let tag = if split.unseen.contains(cat) {
            SplitTag::Unseen
        } else if split.seen.contains(cat) {
            SplitTag::Seen
        } else {
            return Err(Error::UnknownCategory {
                name: cat.clone(),
                known: split.all().into_iter().collect::<Vec<_>>().join(", "),
            });
        };
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for (i, scene) in scenes.iter().enumerate() {
            let boxes = scene.boxes_of(cat);
            if boxes.is_empty() {
                continue;
            }
            let sketches = query_sketches(opts.seed, i, cat, opts.n_queries, opts.noise, model.config().sketch_size)?;
            let loc = model.localize(&scene.image, &sketches, opts.fusion, inference)?;
            dets.push(loc.detections);
            gts.push(boxes);
        }
        let (Some(ap50), Some(map)) = (compute_ap(&dets, &gts, 0.5), compute_map(&dets, &gts)) else {
            continue;
        };
        per_category.insert(
            cat.clone(),
            CategoryResult {
                tag,
                ap50,
                map,
                images: gts.len(),
                instances: gts.iter().map(Vec::len).sum(),
            },
        );
    }
    Ok(EvalReport {
        n_queries: opts.n_queries,
        fusion: opts.fusion,
        noise: opts.noise,
        seed: opts.seed,
        interpolation: "all-point".into(),
        map_convention: "mean AP over IoU 0.50:0.05:0.95".into(),
        model_digest: model.digest(),
        model_stage: model.stage().number(),
        seen: aggregate(&per_category, Some(SplitTag::Seen)),
        unseen: aggregate(&per_category, Some(SplitTag::Unseen)),
        all: aggregate(&per_category, None),
        per_category,
        warnings,
    })
}
