//! Named, ordered parameter storage shared by every trainable layer.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Parameters in registration order. The order is part of the checkpoint
/// contract and of the flat enumeration used by gradient checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry<F> {
    entries: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamRegistry<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<F>) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "parameter {name}: shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.entries[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.entries[id.0].data
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.id_of(name).map(|id| &self.entries[id.0])
    }

    pub fn entries(&self) -> &[Param<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<F>] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![F::zero(); p.data.len()],
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.entries {
            p.data.fill(F::zero());
        }
    }

    pub fn cast<G: Real>(&self) -> ParamRegistry<G> {
        ParamRegistry {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| G::c(v.as_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Adds `other` entry-wise. Both registries must share a layout.
    pub fn accumulate(&mut self, other: &Self) {
        debug_assert_eq!(self.entries.len(), other.entries.len());
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for p in &mut self.entries {
            for v in &mut p.data {
                *v *= s;
            }
        }
    }

    /// Flat view `(entry, offset)` for position `flat` in enumeration order.
    pub fn locate(&self, mut flat: usize) -> Option<(ParamId, usize)> {
        for (i, p) in self.entries.iter().enumerate() {
            if flat < p.data.len() {
                return Some((ParamId(i), flat));
            }
            flat -= p.data.len();
        }
        None
    }
}

/// Fan-in scaled uniform initialisation, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn fan_in_uniform<F: Real, R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<F> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| F::c(rng.random_range(-bound..bound))).collect()
}


impl<F: Real> ParamRegistry<F> {
    /// Mutable access to two distinct entries at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [F], &mut [F]) {
        assert_ne!(a, b, "pair_mut needs distinct entries");
        if a.0 < b.0 {
            let (lo, hi) = self.entries.split_at_mut(b.0);
            (&mut lo[a.0].data, &mut hi[0].data)
        } else {
            let (lo, hi) = self.entries.split_at_mut(a.0);
            (&mut hi[0].data, &mut lo[b.0].data)
        }
    }
}
