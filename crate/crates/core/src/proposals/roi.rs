use super::boxes::BBox;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::FeatureMap;

/// For each pooled output element, the flat index of the input element it
/// was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiCache {
    pub argmax: Vec<usize>,
}

fn bin_edges(start: usize, len: usize, out: usize, i: usize, limit: usize) -> (usize, usize) {
    let lo = start + i * len / out;
    let hi = (start + ((i + 1) * len).div_ceil(out)).min(limit);
    if hi <= lo {
        // empty bin: fall back to the nearest valid cell
        let c = lo.min(limit - 1);
        (c, c + 1)
    } else {
        (lo, hi)
    }
}

fn feature_span(lo: f64, hi: f64, stride: f64, limit: usize) -> Option<(usize, usize)> {
    let s = (lo / stride).floor();
    let e = (hi / stride).ceil();
    if e <= 0.0 || s >= limit as f64 {
        return None;
    }
    let s = s.max(0.0) as usize;
    let e = (e as usize).min(limit);
    Some((s, e.max(s + 1)))
}

/// Max-pools each box (pixel coordinates) into an `out_size x out_size` grid
/// over `map`. Boxes are divided by the map stride and floored/ceiled to
/// whole cells.
pub fn roi_pool<F: Real>(
    map: &FeatureMap<F>,
    boxes: &[BBox],
    out_size: usize,
) -> Result<(Vec<FeatureMap<F>>, Vec<RoiCache>)> {
    if out_size == 0 {
        return Err(Error::Config("roi output size must be at least 1".into()));
    }
    let stride = map.stride() as f64;
    let (h, w, d) = (map.height(), map.width(), map.depth());
    let mut outs = Vec::with_capacity(boxes.len());
    let mut caches = Vec::with_capacity(boxes.len());
    for b in boxes {
        let (Some((sx, ex)), Some((sy, ey))) = (
            feature_span(b.x1, b.x2, stride, w),
            feature_span(b.y1, b.y2, stride, h),
        ) else {
            return Err(Error::BoxOutside(b.to_array()));
        };
        let mut data = Vec::with_capacity(d * out_size * out_size);
        let mut argmax = Vec::with_capacity(d * out_size * out_size);
        for c in 0..d {
            for i in 0..out_size {
                let (y0, y1) = bin_edges(sy, ey - sy, out_size, i, h);
                for j in 0..out_size {
                    let (x0, x1) = bin_edges(sx, ex - sx, out_size, j, w);
                    let mut best = map.index(c, y0, x0);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let idx = map.index(c, y, x);
                            if map.data()[idx] > map.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    data.push(map.data()[best]);
                    argmax.push(best);
                }
            }
        }
        outs.push(FeatureMap::new(d, out_size, out_size, map.stride(), data)?);
        caches.push(RoiCache { argmax });
    }
    Ok((outs, caches))
}

/// Routes pooled-output gradients back to the source cells of `map`.
pub fn roi_pool_backward<F: Real>(
    map_like: &FeatureMap<F>,
    caches: &[RoiCache],
    grads: &[FeatureMap<F>],
) -> FeatureMap<F> {
    let mut out = map_like.zeros_like();
    for (cache, g) in caches.iter().zip(grads) {
        for (&src, &v) in cache.argmax.iter().zip(g.data()) {
            out.data_mut()[src] += v;
        }
    }
    out
}
