use rand::seq::SliceRandom;
use rand::Rng;

use super::anchors::AnchorGrid;
use super::boxes::{iou, BBox, BoxCoder};
use crate::error::Result;
use crate::nn::{relu_backward, relu_in_place, ConvCache, ConvGeom, ConvLayer, Init};
use crate::params::ParamRegistry;
use crate::real::Real;
use crate::tensor::FeatureMap;

/// 3x3 ramp trunk followed by sibling 1x1 objectness and box-delta heads.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnHead {
    pub trunk: ConvLayer,
    pub objectness: ConvLayer,
    pub deltas: ConvLayer,
    pub per_cell: usize,
}

/// Per-anchor outputs, indexed like [`AnchorGrid::anchors`].
#[derive(Clone, Debug, PartialEq)]
pub struct RpnOutput<F> {
    pub logits: Vec<F>,
    pub deltas: Vec<[F; 4]>,
}

impl<F: Real> RpnOutput<F> {
    pub fn objectness(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| crate::nn::sigmoid(z).as_f64()).collect()
    }

    pub fn deltas_f64(&self) -> Vec<[f64; 4]> {
        self.deltas.iter().map(|d| d.map(|v| v.as_f64())).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RpnCache<F> {
    trunk_cache: ConvCache<F>,
    trunk_out: FeatureMap<F>,
    obj_cache: ConvCache<F>,
    delta_cache: ConvCache<F>,
}

impl RpnHead {
    pub fn register<F: Real, R: Rng>(
        reg: &mut ParamRegistry<F>,
        depth: usize,
        channels: usize,
        per_cell: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            trunk: ConvLayer::register(reg, "rpn.trunk", ConvGeom::same3x3(depth, channels, 1), Init::FanIn, rng)?,
            objectness: ConvLayer::register(reg, "rpn.objectness", ConvGeom::pointwise(channels, per_cell), Init::FanIn, rng)?,
            deltas: ConvLayer::register(reg, "rpn.deltas", ConvGeom::pointwise(channels, 4 * per_cell), Init::FanIn, rng)?,
            per_cell,
        })
    }

    pub fn forward<F: Real>(&self, reg: &ParamRegistry<F>, map: &FeatureMap<F>) -> (RpnOutput<F>, RpnCache<F>) {
        let (mut trunk_out, trunk_cache) = self.trunk.forward(reg, map);
        relu_in_place(trunk_out.data_mut());
        let (obj, obj_cache) = self.objectness.forward(reg, &trunk_out);
        let (del, delta_cache) = self.deltas.forward(reg, &trunk_out);
        let (h, w, a) = (map.height(), map.width(), self.per_cell);
        let mut logits = Vec::with_capacity(h * w * a);
        let mut deltas = Vec::with_capacity(h * w * a);
        for y in 0..h {
            for x in 0..w {
                for j in 0..a {
                    logits.push(obj.get(j, y, x));
                    deltas.push(std::array::from_fn(|t| del.get(4 * j + t, y, x)));
                }
            }
        }
        (
            RpnOutput { logits, deltas },
            RpnCache {
                trunk_cache,
                trunk_out,
                obj_cache,
                delta_cache,
            },
        )
    }

    /// Back-propagates per-anchor gradients; returns the input-map gradient.
    pub fn backward<F: Real>(
        &self,
        reg: &ParamRegistry<F>,
        cache: &RpnCache<F>,
        dlogits: &[F],
        ddeltas: &[[F; 4]],
        grads: &mut ParamRegistry<F>,
    ) -> FeatureMap<F> {
        let t = &cache.trunk_out;
        let (h, w, a) = (t.height(), t.width(), self.per_cell);
        let mut dobj = FeatureMap::zeros(a, h, w, t.stride());
        let mut ddel = FeatureMap::zeros(4 * a, h, w, t.stride());
        for y in 0..h {
            for x in 0..w {
                for j in 0..a {
                    let idx = (y * w + x) * a + j;
                    dobj.set(j, y, x, dlogits[idx]);
                    for k in 0..4 {
                        ddel.set(4 * j + k, y, x, ddeltas[idx][k]);
                    }
                }
            }
        }
        let mut dtrunk = self
            .objectness
            .backward(reg, &cache.obj_cache, &dobj, grads, true)
            .expect("input grad requested");
        let d2 = self
            .deltas
            .backward(reg, &cache.delta_cache, &ddel, grads, true)
            .expect("input grad requested");
        dtrunk.add_assign(&d2);
        relu_backward(t.data(), dtrunk.data_mut());
        self.trunk
            .backward(reg, &cache.trunk_cache, &dtrunk, grads, true)
            .expect("input grad requested")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RpnTargetConfig {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub batch: usize,
    pub positive_fraction: f64,
}

impl Default for RpnTargetConfig {
    fn default() -> Self {
        Self {
            positive_iou: 0.7,
            negative_iou: 0.3,
            batch: 32,
            positive_fraction: 0.5,
        }
    }
}

/// Sampled anchor labels and the regression targets of the positives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<(usize, u8)>,
    pub regression: Vec<(usize, [f64; 4])>,
}

/// Faster R-CNN style anchor assignment: positive at IoU >= `positive_iou`
/// with any ground truth or when an anchor is the best match of some ground
/// truth; negative below `negative_iou` with all of them.
pub fn assign_rpn_targets<R: Rng>(
    grid: &AnchorGrid,
    gts: &[BBox],
    coder: &BoxCoder,
    cfg: &RpnTargetConfig,
    rng: &mut R,
) -> RpnTargets {
    let n = grid.anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut gt_best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gts.len()];
    for (i, a) in grid.anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(a, gt);
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = g;
            }
            if v > gt_best[g].0 {
                gt_best[g] = (v, i);
            }
        }
    }
    let mut label: Vec<i8> = best_iou
        .iter()
        .map(|&v| if v >= cfg.positive_iou { 1 } else if v < cfg.negative_iou { 0 } else { -1 })
        .collect();
    for (g, &(v, i)) in gt_best.iter().enumerate() {
        if v > 0.0 {
            label[i] = 1;
            if best_gt[i] == usize::MAX || iou(&grid.anchors[i], &gts[best_gt[i]]) < v {
                best_gt[i] = g;
            }
        }
    }
    let mut pos: Vec<usize> = (0..n).filter(|&i| label[i] == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| label[i] == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate((cfg.batch as f64 * cfg.positive_fraction).round() as usize);
    neg.truncate(cfg.batch.saturating_sub(pos.len()));
    let mut out = RpnTargets::default();
    for &i in &pos {
        out.labels.push((i, 1));
        out.regression.push((i, coder.encode(&grid.anchors[i], &gts[best_gt[i]])));
    }
    out.labels.extend(neg.iter().map(|&i| (i, 0)));
    out
}
