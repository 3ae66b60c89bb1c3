//! Spatial feature grids and pooled feature vectors.

use crate::error::{Error, Result};
use crate::real::Real;

/// A `width x height x depth` grid of feature vectors, stored channel-major
/// (`data[c * height * width + y * width + x]`).
///
/// `stride` is the number of input pixels covered by one feature cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    depth: usize,
    height: usize,
    width: usize,
    stride: usize,
    data: Vec<F>,
}

impl<F: Real> FeatureMap<F> {
    pub fn new(depth: usize, height: usize, width: usize, stride: usize, data: Vec<F>) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "feature map dims must be positive, got {width}x{height}x{depth}"
            )));
        }
        if data.len() != depth * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for {width}x{height}x{depth}, got {}",
                depth * height * width,
                data.len()
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
            stride: stride.max(1),
            data,
        })
    }

    pub fn zeros(depth: usize, height: usize, width: usize, stride: usize) -> Self {
        Self::new(depth, height, width, stride, vec![F::zero(); depth * height * width])
            .expect("zeros: positive dims")
    }

    pub fn filled(depth: usize, height: usize, width: usize, stride: usize, value: F) -> Self {
        Self::new(depth, height, width, stride, vec![value; depth * height * width])
            .expect("filled: positive dims")
    }

    /// Builds a map from `f(channel, y, x)`.
    pub fn from_fn(
        depth: usize,
        height: usize,
        width: usize,
        stride: usize,
        mut f: impl FnMut(usize, usize, usize) -> F,
    ) -> Self {
        let mut data = Vec::with_capacity(depth * height * width);
        for c in 0..depth {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(depth, height, width, stride, data).expect("from_fn: positive dims")
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> F {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: F) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let n = self.cells();
        &self.data[c * n..(c + 1) * n]
    }

    /// The local feature vector at cell `(y, x)`.
    pub fn local_vector(&self, y: usize, x: usize) -> Vec<F> {
        (0..self.depth).map(|c| self.get(c, y, x)).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.depth == other.depth && self.height == other.height && self.width == other.width
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.depth)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn cast<G: Real>(&self) -> FeatureMap<G> {
        FeatureMap {
            depth: self.depth,
            height: self.height,
            width: self.width,
            stride: self.stride,
            data: self.data.iter().map(|v| G::c(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl<F: Clone> FeatureMap<F> {
    fn shape_clone_with(&self, data: Vec<F>) -> Self {
        Self {
            depth: self.depth,
            height: self.height,
            width: self.width,
            stride: self.stride,
            data,
        }
    }
}

impl<F: Real> FeatureMap<F> {
    pub fn zeros_like(&self) -> Self {
        self.shape_clone_with(vec![F::zero(); self.data.len()])
    }
}

/// A length-`d` pooled feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector<F>(pub Vec<F>);

impl<F: Real> FeatureVector<F> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[F] {
        &self.0
    }

    pub fn dot(&self, other: &[F]) -> F {
        self.0.iter().zip(other).map(|(&a, &b)| a * b).sum()
    }
}
