//! Cross-modal attention: compatibility scores between local image vectors and
//! a global sketch vector, attended features, concat + projection, and the two
//! multi-query fusion strategies.

use base64::Engine;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvCache, ConvGeom, ConvLayer, Init};
use crate::params::{fan_in_uniform, ParamRegistry};
use crate::real::Real;
use crate::tensor::{FeatureMap, FeatureVector};

/// Default scaling constant for the compatibility dot product.
pub const DEFAULT_K: f64 = 256.0;

/// Row-major `height × width` grid of scaled dot products.
#[derive(Clone, Debug, PartialEq)]
pub struct CompatibilityMap<F> {
    pub height: usize,
    pub width: usize,
    pub k: f64,
    pub scores: Vec<F>,
}

impl<F: Real> CompatibilityMap<F> {
    pub fn filled(height: usize, width: usize, k: f64, value: F) -> Self {
        Self {
            height,
            width,
            k,
            scores: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> F {
        self.scores[y * self.width + x]
    }

    fn same_grid(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Cell of the highest score (first on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.scores.iter().enumerate() {
            if v > self.scores[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

/// One or more sketch feature maps of identical shape, all depicting the same
/// category.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBundle<F> {
    maps: Vec<FeatureMap<F>>,
}

impl<F: Real> QueryBundle<F> {
    pub fn new(maps: Vec<FeatureMap<F>>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::validation("sketches", "at least one sketch is required"))?;
        if let Some(bad) = maps.iter().find(|m| !m.same_shape(first)) {
            return Err(Error::Shape(format!(
                "query bundle members differ: {} vs {}",
                first.shape_str(),
                bad.shape_str()
            )));
        }
        Ok(Self { maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[FeatureMap<F>] {
        &self.maps
    }
}

pub fn compatibility_map<F: Real>(
    img_psi: &FeatureMap<F>,
    sketch_global: &FeatureVector<F>,
    k: f64,
) -> Result<CompatibilityMap<F>> {
    if img_psi.depth() != sketch_global.len() {
        return Err(Error::Shape(format!(
            "image depth {} does not match sketch vector length {}",
            img_psi.depth(),
            sketch_global.len()
        )));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Config(format!("compatibility constant must be positive, got {k}")));
    }
    let cells = img_psi.cells();
    let mut scores = vec![F::zero(); cells];
    for (c, &g) in sketch_global.0.iter().enumerate() {
        for (s, &v) in scores.iter_mut().zip(img_psi.channel(c)) {
            *s += v * g;
        }
    }
    let kf = F::c(k);
    for s in &mut scores {
        *s /= kf;
    }
    Ok(CompatibilityMap {
        height: img_psi.height(),
        width: img_psi.width(),
        k,
        scores,
    })
}

/// Gradients of [`compatibility_map`] w.r.t. the image map and sketch vector.
pub fn compatibility_map_backward<F: Real>(
    img_psi: &FeatureMap<F>,
    sketch_global: &FeatureVector<F>,
    k: f64,
    dscores: &[F],
) -> (FeatureMap<F>, Vec<F>) {
    let kf = F::c(k);
    let mut dimg = img_psi.zeros_like();
    let cells = img_psi.cells();
    let mut dg = vec![F::zero(); sketch_global.len()];
    for (c, &g) in sketch_global.0.iter().enumerate() {
        let ch = img_psi.channel(c);
        let dch = &mut dimg.data_mut()[c * cells..(c + 1) * cells];
        let mut acc = F::zero();
        for p in 0..cells {
            dch[p] = dscores[p] * g / kf;
            acc += dscores[p] * ch[p];
        }
        dg[c] = acc / kf;
    }
    (dimg, dg)
}

pub fn apply_attention<F: Real>(img_phi: &FeatureMap<F>, cmap: &CompatibilityMap<F>) -> Result<FeatureMap<F>> {
    if cmap.height != img_phi.height() || cmap.width != img_phi.width() {
        return Err(Error::Shape(format!(
            "attention map {}x{} does not match feature map {}",
            cmap.height,
            cmap.width,
            img_phi.shape_str()
        )));
    }
    let cells = img_phi.cells();
    let mut out = img_phi.clone();
    for c in 0..img_phi.depth() {
        for (v, &s) in out.data_mut()[c * cells..(c + 1) * cells].iter_mut().zip(&cmap.scores) {
            *v *= s;
        }
    }
    Ok(out)
}

/// Gradients of [`apply_attention`] w.r.t. the image map and the scores.
pub fn apply_attention_backward<F: Real>(
    img_phi: &FeatureMap<F>,
    cmap: &CompatibilityMap<F>,
    dout: &FeatureMap<F>,
) -> (FeatureMap<F>, Vec<F>) {
    let cells = img_phi.cells();
    let mut dimg = dout.clone();
    let mut ds = vec![F::zero(); cells];
    for c in 0..img_phi.depth() {
        let range = c * cells..(c + 1) * cells;
        let phi = &img_phi.data()[range.clone()];
        let d = &mut dimg.data_mut()[range];
        for p in 0..cells {
            ds[p] += d[p] * phi[p];
            d[p] *= cmap.scores[p];
        }
    }
    (dimg, ds)
}

/// Pointwise `2d -> d` projection of `[attended; original]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub layer: ConvLayer,
}

impl Projection {
    /// Random weights on the attended block, identity on the original block:
    /// at initialisation the projection passes the original map through.
    pub fn register<F: Real, R: Rng>(reg: &mut ParamRegistry<F>, name: &str, depth: usize, rng: &mut R) -> Result<Self> {
        let d = depth;
        let random: Vec<F> = fan_in_uniform(rng, d * d, 2 * d);
        let mut w = vec![F::zero(); d * 2 * d];
        for o in 0..d {
            for i in 0..d {
                w[o * 2 * d + i] = random[o * d + i];
            }
            w[o * 2 * d + d + o] = F::one();
        }
        Self::with_weights(reg, name, depth, w)
    }

    pub fn with_weights<F: Real>(reg: &mut ParamRegistry<F>, name: &str, depth: usize, weights: Vec<F>) -> Result<Self> {
        // weights are fully specified so the rng is never consulted
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let layer = ConvLayer::register(reg, name, ConvGeom::pointwise(2 * depth, depth), Init::Weights(weights), &mut unused)?;
        Ok(Self { layer })
    }

    pub fn depth(&self) -> usize {
        self.layer.geom.cout
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionCache<F> {
    conv: ConvCache<F>,
}

fn concat_depth<F: Real>(a: &FeatureMap<F>, b: &FeatureMap<F>) -> FeatureMap<F> {
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    FeatureMap::new(a.depth() + b.depth(), a.height(), a.width(), a.stride(), data).expect("consistent concat")
}

pub fn fuse_and_project<F: Real>(
    reg: &ParamRegistry<F>,
    projection: &Projection,
    attended: &FeatureMap<F>,
    original: &FeatureMap<F>,
) -> Result<(FeatureMap<F>, ProjectionCache<F>)> {
    if !attended.same_shape(original) {
        return Err(Error::Shape(format!(
            "attended {} and original {} differ",
            attended.shape_str(),
            original.shape_str()
        )));
    }
    if original.depth() != projection.depth() {
        return Err(Error::Shape(format!(
            "projection expects depth {}, got {}",
            projection.depth(),
            original.depth()
        )));
    }
    let cat = concat_depth(attended, original);
    let (out, conv) = projection.layer.forward(reg, &cat);
    Ok((out, ProjectionCache { conv }))
}

/// Returns gradients w.r.t. `(attended, original)`.
pub fn fuse_and_project_backward<F: Real>(
    reg: &ParamRegistry<F>,
    projection: &Projection,
    cache: &ProjectionCache<F>,
    dout: &FeatureMap<F>,
    grads: &mut ParamRegistry<F>,
) -> (FeatureMap<F>, FeatureMap<F>) {
    let dcat = projection
        .layer
        .backward(reg, &cache.conv, dout, grads, true)
        .expect("input grad requested");
    let d = projection.depth();
    let half = d * dout.cells();
    let (h, w, s) = (dout.height(), dout.width(), dout.stride());
    let data = dcat.into_data();
    (
        FeatureMap::new(d, h, w, s, data[..half].to_vec()).expect("split"),
        FeatureMap::new(d, h, w, s, data[half..].to_vec()).expect("split"),
    )
}

/// Elementwise maximum over the bundle; `winners[i]` is the member that
/// supplied element `i` (lowest index on ties).
pub fn feature_fusion_with_winners<F: Real>(qb: &QueryBundle<F>) -> (FeatureMap<F>, Vec<usize>) {
    let mut out = qb.maps[0].clone();
    let mut winners = vec![0usize; out.data().len()];
    for (m, map) in qb.maps.iter().enumerate().skip(1) {
        for ((o, w), &v) in out.data_mut().iter_mut().zip(winners.iter_mut()).zip(map.data()) {
            if v > *o {
                *o = v;
                *w = m;
            }
        }
    }
    (out, winners)
}

pub fn feature_fusion<F: Real>(qb: &QueryBundle<F>) -> FeatureMap<F> {
    feature_fusion_with_winners(qb).0
}

/// Routes the fused-map gradient back to the winning member of each element.
pub fn feature_fusion_backward<F: Real>(qb: &QueryBundle<F>, winners: &[usize], dout: &FeatureMap<F>) -> Vec<FeatureMap<F>> {
    let mut grads: Vec<_> = qb.maps.iter().map(|m| m.zeros_like()).collect();
    for (i, (&w, &g)) in winners.iter().zip(dout.data()).enumerate() {
        grads[w].data_mut()[i] = g;
    }
    grads
}

/// Cellwise arithmetic mean of the maps (sum, then divide by `N`).
pub fn attention_fusion<F: Real>(cmaps: &[CompatibilityMap<F>]) -> Result<CompatibilityMap<F>> {
    let first = cmaps
        .first()
        .ok_or_else(|| Error::validation("sketches", "at least one attention map is required"))?;
    if let Some(bad) = cmaps.iter().find(|m| !m.same_grid(first)) {
        return Err(Error::Shape(format!(
            "attention maps differ: {}x{} vs {}x{}",
            first.height, first.width, bad.height, bad.width
        )));
    }
    let n = F::c(cmaps.len() as f64);
    let mut scores = first.scores.clone();
    for m in &cmaps[1..] {
        for (s, &v) in scores.iter_mut().zip(&m.scores) {
            *s += v;
        }
    }
    for s in &mut scores {
        *s /= n;
    }
    Ok(CompatibilityMap {
        height: first.height,
        width: first.width,
        k: first.k,
        scores,
    })
}

pub fn attention_fusion_backward<F: Real>(n: usize, dscores: &[F]) -> Vec<F> {
    let nf = F::c(n as f64);
    dscores.iter().map(|&g| g / nf).collect()
}

/// An attention map upsampled to image resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Heatmap {
    /// Nearest-neighbour upsampling by `stride`.
    pub fn upsample<F: Real>(cmap: &CompatibilityMap<F>, stride: usize) -> Self {
        let (h, w) = (cmap.height * stride, cmap.width * stride);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(cmap.get(y / stride, x / stride).as_f64() as f32);
            }
        }
        Self { height: h, width: w, data }
    }

    /// Little-endian f32 row-major bytes, base64 encoded.
    pub fn to_base64(&self) -> String {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        base64::engine::general_purpose::STANDARD.encode(bytes)
    }

    pub fn from_base64(height: usize, width: usize, text: &str) -> Result<Self> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(|e| Error::Decode(format!("heatmap: {e}")))?;
        if bytes.len() != height * width * 4 {
            return Err(Error::Decode(format!(
                "heatmap: expected {} bytes for {height}x{width}, got {}",
                height * width * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { height, width, data })
    }
}
