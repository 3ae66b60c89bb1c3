//! Differentiable building blocks: strided 2-D convolution via im2col,
//! fully connected layers and the ramp nonlinearity.

use rand::Rng;

use crate::error::Result;
use crate::params::{fan_in_uniform, ParamId, ParamRegistry};
use crate::real::Real;
use crate::tensor::FeatureMap;

/// How a freshly registered layer is initialised.
#[derive(Clone, Debug, PartialEq)]
pub enum Init<F> {
    /// Fan-in scaled uniform weights, zero bias.
    FanIn,
    /// All-zero weights and bias.
    Zero,
    /// Explicit weights, zero bias.
    Weights(Vec<F>),
}

fn init_weights<F: Real, R: Rng>(init: Init<F>, rng: &mut R, n: usize, fan_in: usize) -> Vec<F> {
    match init {
        Init::FanIn => fan_in_uniform(rng, n, fan_in),
        Init::Zero => vec![F::zero(); n],
        Init::Weights(w) => {
            assert_eq!(w.len(), n, "explicit weights have the wrong length");
            w
        }
    }
}

/// A convolution whose weights live in a [`ParamRegistry`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub geom: ConvGeom,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn register<F: Real, R: Rng>(
        reg: &mut ParamRegistry<F>,
        name: &str,
        geom: ConvGeom,
        init: Init<F>,
        rng: &mut R,
    ) -> Result<Self> {
        let n = geom.cout * geom.patch_len();
        let w = init_weights(init, rng, n, geom.patch_len());
        let weight = reg.register(&format!("{name}.weight"), &geom.weight_shape(), w)?;
        let bias = reg.register(&format!("{name}.bias"), &[geom.cout], vec![F::zero(); geom.cout])?;
        Ok(Self { geom, weight, bias })
    }

    pub fn forward<F: Real>(&self, reg: &ParamRegistry<F>, input: &FeatureMap<F>) -> (FeatureMap<F>, ConvCache<F>) {
        conv_forward(input, reg.get(self.weight), reg.get(self.bias), &self.geom)
    }

    pub fn backward<F: Real>(
        &self,
        reg: &ParamRegistry<F>,
        cache: &ConvCache<F>,
        dout: &FeatureMap<F>,
        grads: &mut ParamRegistry<F>,
        want_input: bool,
    ) -> Option<FeatureMap<F>> {
        let (dw, db) = grads.pair_mut(self.weight, self.bias);
        conv_backward(cache, reg.get(self.weight), dout, &self.geom, dw, db, want_input)
    }
}

/// A fully connected layer, `out_dim x in_dim` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn register<F: Real, R: Rng>(
        reg: &mut ParamRegistry<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init<F>,
        rng: &mut R,
    ) -> Result<Self> {
        let w = init_weights(init, rng, in_dim * out_dim, in_dim);
        let weight = reg.register(&format!("{name}.weight"), &[out_dim, in_dim], w)?;
        let bias = reg.register(&format!("{name}.bias"), &[out_dim], vec![F::zero(); out_dim])?;
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    /// `x` holds `n` rows of `in_dim` values.
    pub fn forward<F: Real>(&self, reg: &ParamRegistry<F>, x: &[F], n: usize) -> Vec<F> {
        linear_forward(x, n, reg.get(self.weight), reg.get(self.bias), self.out_dim)
    }

    pub fn backward<F: Real>(
        &self,
        reg: &ParamRegistry<F>,
        x: &[F],
        n: usize,
        dy: &[F],
        grads: &mut ParamRegistry<F>,
    ) -> Vec<F> {
        let (dw, db) = grads.pair_mut(self.weight, self.bias);
        linear_backward(x, n, reg.get(self.weight), dy, self.out_dim, dw, db)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    pub fn same3x3(cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: 3,
            stride,
            pad: 1,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.kernel, self.kernel]
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn out_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let h = (height + 2 * self.pad - self.kernel) / self.stride + 1;
        let w = (width + 2 * self.pad - self.kernel) / self.stride + 1;
        (h, w)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Saved state needed to back-propagate through a convolution.
#[derive(Clone, Debug)]
pub struct ConvCache<F> {
    /// im2col patches (`patch_len x out_cells`); empty for pointwise convs,
    /// which read the input directly.
    col: Vec<F>,
    input: Option<FeatureMap<F>>,
    in_dims: (usize, usize),
}

fn im2col<F: Real>(input: &FeatureMap<F>, g: &ConvGeom, hout: usize, wout: usize) -> Vec<F> {
    let (h, w) = (input.height(), input.width());
    let cells = hout * wout;
    let mut col = vec![F::zero(); g.patch_len() * cells];
    let data = input.data();
    for ci in 0..g.cin {
        let plane = &data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * cells..(row + 1) * cells];
                for oy in 0..hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wout + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Real>(dcol: &[F], g: &ConvGeom, h: usize, w: usize, hout: usize, wout: usize) -> Vec<F> {
    let cells = hout * wout;
    let mut out = vec![F::zero(); g.cin * h * w];
    for ci in 0..g.cin {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &dcol[row * cells..(row + 1) * cells];
                for oy in 0..hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wout + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution forward pass. `weight` is `cout x cin x k x k`, row-major.
pub fn conv_forward<F: Real>(
    input: &FeatureMap<F>,
    weight: &[F],
    bias: &[F],
    g: &ConvGeom,
) -> (FeatureMap<F>, ConvCache<F>) {
    assert_eq!(input.depth(), g.cin, "conv input depth");
    assert_eq!(weight.len(), g.cout * g.patch_len());
    assert_eq!(bias.len(), g.cout);
    let (h, w) = (input.height(), input.width());
    let (hout, wout) = g.out_dims(h, w);
    let cells = hout * wout;
    let mut out = vec![F::zero(); g.cout * cells];
    for (c, &b) in bias.iter().enumerate() {
        out[c * cells..(c + 1) * cells].fill(b);
    }
    let r = g.patch_len();
    let cache = if g.is_pointwise() {
        F::gemm(
            g.cout,
            r,
            cells,
            F::one(),
            weight,
            (r as isize, 1),
            input.data(),
            (cells as isize, 1),
            F::one(),
            &mut out,
            (cells as isize, 1),
        );
        ConvCache {
            col: Vec::new(),
            input: Some(input.clone()),
            in_dims: (h, w),
        }
    } else {
        let col = im2col(input, g, hout, wout);
        F::gemm(
            g.cout,
            r,
            cells,
            F::one(),
            weight,
            (r as isize, 1),
            &col,
            (cells as isize, 1),
            F::one(),
            &mut out,
            (cells as isize, 1),
        );
        ConvCache {
            col,
            input: None,
            in_dims: (h, w),
        }
    };
    let fm = FeatureMap::new(g.cout, hout, wout, input.stride() * g.stride, out)
        .expect("conv output dims");
    (fm, cache)
}

/// Convolution backward pass. Accumulates into `dweight`/`dbias` and returns
/// the input gradient when `want_input` is set.
pub fn conv_backward<F: Real>(
    cache: &ConvCache<F>,
    weight: &[F],
    dout: &FeatureMap<F>,
    g: &ConvGeom,
    dweight: &mut [F],
    dbias: &mut [F],
    want_input: bool,
) -> Option<FeatureMap<F>> {
    let (h, w) = cache.in_dims;
    let (hout, wout) = (dout.height(), dout.width());
    let cells = hout * wout;
    let r = g.patch_len();
    let d = dout.data();
    for (c, db) in dbias.iter_mut().enumerate() {
        *db += d[c * cells..(c + 1) * cells].iter().copied().sum::<F>();
    }
    let col: &[F] = match &cache.input {
        Some(input) => input.data(),
        None => &cache.col,
    };
    // dW (cout x r) += dout (cout x cells) * col^T (cells x r)
    F::gemm(
        g.cout,
        cells,
        r,
        F::one(),
        d,
        (cells as isize, 1),
        col,
        (1, cells as isize),
        F::one(),
        dweight,
        (r as isize, 1),
    );
    if !want_input {
        return None;
    }
    // dcol (r x cells) = W^T (r x cout) * dout (cout x cells)
    let mut dcol = vec![F::zero(); r * cells];
    F::gemm(
        r,
        g.cout,
        cells,
        F::one(),
        weight,
        (1, r as isize),
        d,
        (cells as isize, 1),
        F::zero(),
        &mut dcol,
        (cells as isize, 1),
    );
    let stride_in = (dout.stride() / g.stride).max(1);
    let data = if g.is_pointwise() {
        dcol
    } else {
        col2im(&dcol, g, h, w, hout, wout)
    };
    Some(FeatureMap::new(g.cin, h, w, stride_in, data).expect("conv input dims"))
}

pub fn relu_in_place<F: Real>(xs: &mut [F]) {
    for v in xs {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Zeroes `grad` wherever the ramp output was not positive.
pub fn relu_backward<F: Real>(output: &[F], grad: &mut [F]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Row-batched affine map: `y[n x out] = x[n x in] * W^T + b`, `W` is `out x in`.
pub fn linear_forward<F: Real>(x: &[F], n: usize, weight: &[F], bias: &[F], out_dim: usize) -> Vec<F> {
    let in_dim = weight.len() / out_dim;
    assert_eq!(x.len(), n * in_dim);
    let mut y = Vec::with_capacity(n * out_dim);
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    F::gemm(
        n,
        in_dim,
        out_dim,
        F::one(),
        x,
        (in_dim as isize, 1),
        weight,
        (1, in_dim as isize),
        F::one(),
        &mut y,
        (out_dim as isize, 1),
    );
    y
}

/// Backward of [`linear_forward`]; returns `dx`.
pub fn linear_backward<F: Real>(
    x: &[F],
    n: usize,
    weight: &[F],
    dy: &[F],
    out_dim: usize,
    dweight: &mut [F],
    dbias: &mut [F],
) -> Vec<F> {
    let in_dim = weight.len() / out_dim;
    for row in dy.chunks_exact(out_dim) {
        for (db, &g) in dbias.iter_mut().zip(row) {
            *db += g;
        }
    }
    // dW (out x in) += dy^T (out x n) * x (n x in)
    F::gemm(
        out_dim,
        n,
        in_dim,
        F::one(),
        dy,
        (1, out_dim as isize),
        x,
        (in_dim as isize, 1),
        F::one(),
        dweight,
        (in_dim as isize, 1),
    );
    let mut dx = vec![F::zero(); n * in_dim];
    F::gemm(
        n,
        out_dim,
        in_dim,
        F::one(),
        dy,
        (out_dim as isize, 1),
        weight,
        (in_dim as isize, 1),
        F::zero(),
        &mut dx,
        (in_dim as isize, 1),
    );
    dx
}

#[inline]
pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}
