//! Convolutional feature extractors for scenes and sketches, the pointwise
//! compatibility transforms, and global pooling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_in_place, ConvCache, ConvGeom, ConvLayer, Init};
use crate::params::ParamRegistry;
use crate::real::Real;
use crate::synthdata::{RasterSketch, RgbImage};
use crate::tensor::{FeatureMap, FeatureVector};

/// A stack of blocks, each a stride-2 3x3 convolution (optionally followed
/// by stride-1 3x3 convolutions), every convolution followed by a ramp.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    pub in_channels: usize,
    pub layers: Vec<ConvLayer>,
    blocks: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<F> {
    caches: Vec<ConvCache<F>>,
    outputs: Vec<FeatureMap<F>>,
}

impl ConvEncoder {
    pub fn register<F: Real, R: Rng>(
        reg: &mut ParamRegistry<F>,
        prefix: &str,
        in_channels: usize,
        channels: &[usize],
        block_depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels.is_empty() || block_depth == 0 {
            return Err(Error::Config(format!("{prefix}: encoder needs at least one block")));
        }
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (b, &cout) in channels.iter().enumerate() {
            for j in 0..block_depth {
                let stride = if j == 0 { 2 } else { 1 };
                let name = format!("{prefix}.block{b}.conv{j}");
                layers.push(ConvLayer::register(reg, &name, ConvGeom::same3x3(cin, cout, stride), Init::FanIn, rng)?);
                cin = cout;
            }
        }
        Ok(Self {
            in_channels,
            layers,
            blocks: channels.len(),
        })
    }

    pub fn total_stride(&self) -> usize {
        1 << self.blocks
    }

    pub fn depth(&self) -> usize {
        self.layers.last().map(|l| l.geom.cout).unwrap_or(0)
    }

    pub fn forward<F: Real>(
        &self,
        reg: &ParamRegistry<F>,
        input: &FeatureMap<F>,
    ) -> Result<(FeatureMap<F>, EncoderCache<F>)> {
        let stride = self.total_stride();
        if input.height() % stride != 0 || input.width() % stride != 0 {
            return Err(Error::NotDivisible {
                width: input.width(),
                height: input.height(),
                stride,
            });
        }
        if input.depth() != self.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} input channels, got {}",
                self.in_channels,
                input.depth()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (mut y, c) = layer.forward(reg, &x);
            relu_in_place(y.data_mut());
            caches.push(c);
            outputs.push(y.clone());
            x = y;
        }
        Ok((x, EncoderCache { caches, outputs }))
    }

    /// Accumulates parameter gradients for `dout` (gradient of the output).
    pub fn backward<F: Real>(
        &self,
        reg: &ParamRegistry<F>,
        cache: &EncoderCache<F>,
        dout: &FeatureMap<F>,
        grads: &mut ParamRegistry<F>,
    ) {
        let mut g = dout.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            relu_backward(cache.outputs[i].data(), g.data_mut());
            let want_input = i > 0;
            match layer.backward(reg, &cache.caches[i], &g, grads, want_input) {
                Some(next) => g = next,
                None => break,
            }
        }
    }
}

pub fn encode_image<F: Real>(
    encoder: &ConvEncoder,
    reg: &ParamRegistry<F>,
    image: &RgbImage,
) -> Result<(FeatureMap<F>, EncoderCache<F>)> {
    encoder.forward(reg, &image.to_feature_map())
}

pub fn encode_sketch<F: Real>(
    encoder: &ConvEncoder,
    reg: &ParamRegistry<F>,
    sketch: &RasterSketch,
) -> Result<(FeatureMap<F>, EncoderCache<F>)> {
    encoder.forward(reg, &sketch.to_feature_map())
}

/// Pointwise `d -> d` convolution followed by a ramp.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub layer: ConvLayer,
}

#[derive(Clone, Debug)]
pub struct TransformCache<F> {
    conv: ConvCache<F>,
    output: FeatureMap<F>,
}

impl Transform {
    pub fn register<F: Real, R: Rng>(
        reg: &mut ParamRegistry<F>,
        name: &str,
        depth: usize,
        init: Init<F>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            layer: ConvLayer::register(reg, name, ConvGeom::pointwise(depth, depth), init, rng)?,
        })
    }

    pub fn forward<F: Real>(
        &self,
        reg: &ParamRegistry<F>,
        fm: &FeatureMap<F>,
    ) -> Result<(FeatureMap<F>, TransformCache<F>)> {
        if fm.depth() != self.layer.geom.cin {
            return Err(Error::Shape(format!(
                "transform expects depth {}, got {}",
                self.layer.geom.cin,
                fm.depth()
            )));
        }
        let (mut out, conv) = self.layer.forward(reg, fm);
        relu_in_place(out.data_mut());
        Ok((
            out.clone(),
            TransformCache { conv, output: out },
        ))
    }

    pub fn backward<F: Real>(
        &self,
        reg: &ParamRegistry<F>,
        cache: &TransformCache<F>,
        dout: &FeatureMap<F>,
        grads: &mut ParamRegistry<F>,
    ) -> FeatureMap<F> {
        let mut g = dout.clone();
        relu_backward(cache.output.data(), g.data_mut());
        self.layer
            .backward(reg, &cache.conv, &g, grads, true)
            .expect("input grad requested")
    }
}

pub fn transform_features<F: Real>(
    transform: &Transform,
    reg: &ParamRegistry<F>,
    fm: &FeatureMap<F>,
) -> Result<FeatureMap<F>> {
    transform.forward(reg, fm).map(|(out, _)| out)
}

/// Per-channel maximum over all cells, with the flat index of each winner
/// (first occurrence on ties).
pub fn global_max_pool_with_argmax<F: Real>(fm: &FeatureMap<F>) -> (FeatureVector<F>, Vec<usize>) {
    let n = fm.cells();
    let mut vals = Vec::with_capacity(fm.depth());
    let mut idx = Vec::with_capacity(fm.depth());
    for c in 0..fm.depth() {
        let ch = fm.channel(c);
        let mut best = 0;
        for (i, &v) in ch.iter().enumerate() {
            if v > ch[best] {
                best = i;
            }
        }
        vals.push(ch[best]);
        idx.push(c * n + best);
    }
    (FeatureVector(vals), idx)
}

pub fn global_max_pool<F: Real>(fm: &FeatureMap<F>) -> FeatureVector<F> {
    global_max_pool_with_argmax(fm).0
}

pub fn global_mean_pool<F: Real>(fm: &FeatureMap<F>) -> FeatureVector<F> {
    let n = F::c(fm.cells() as f64);
    FeatureVector((0..fm.depth()).map(|c| fm.channel(c).iter().copied().sum::<F>() / n).collect())
}

/// Gradient of [`global_mean_pool`]: spreads each channel gradient evenly.
pub fn global_mean_pool_backward<F: Real>(like: &FeatureMap<F>, grad: &[F]) -> FeatureMap<F> {
    let n = F::c(like.cells() as f64);
    let mut out = like.zeros_like();
    let cells = like.cells();
    for (c, &g) in grad.iter().enumerate() {
        out.data_mut()[c * cells..(c + 1) * cells].fill(g / n);
    }
    out
}
