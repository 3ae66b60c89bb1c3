use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::synthdata::{prepare_query, RasterSketch, RgbImage, SceneObject, StrokeSketch};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
}

/// Scenes plus a pre-rasterized pool of query sketches per training category.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    samples: Vec<TrainSample>,
    categories: Vec<String>,
    pool: BTreeMap<String, Vec<RasterSketch>>,
}

impl TrainingSet {
    /// `categories` are the ones that may be queried; sketches of other
    /// categories are ignored.
    pub fn new(
        samples: Vec<TrainSample>,
        categories: Vec<String>,
        sketches: &[StrokeSketch],
        sketch_size: usize,
    ) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::validation("categories", "no training categories"));
        }
        let mut pool: BTreeMap<String, Vec<RasterSketch>> = BTreeMap::new();
        for s in sketches.iter().filter(|s| categories.iter().any(|c| c == s.category())) {
            pool.entry(s.category().to_string())
                .or_default()
                .push(prepare_query(s, sketch_size)?);
        }
        if let Some(missing) = categories.iter().find(|c| !pool.contains_key(*c)) {
            return Err(Error::validation("sketches", format!("no sketches for training category {missing}")));
        }
        Ok(Self {
            samples,
            categories,
            pool,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &TrainSample {
        &self.samples[i]
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn pick_sketch<R: Rng>(&self, category: &str, rng: &mut R) -> Result<&RasterSketch> {
        self.pool
            .get(category)
            .and_then(|v| v.choose(rng))
            .ok_or_else(|| Error::validation("sketches", format!("no sketches for {category}")))
    }
}
