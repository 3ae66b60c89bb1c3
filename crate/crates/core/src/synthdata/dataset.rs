//! The generated data directory: `train/` and `test/` scene archives, a
//! stroke file of query sketches and the category split.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::archive::{read_archive, write_archive, ArchivedScene};
use super::scene::{generate_scene, SceneConfig};
use super::sketch::{generate_sketch, StrokeSketch};
use super::split::{split_categories, CategorySplit};
use super::strokefile::{parse_stroke_file, serialize_stroke_file};
use super::{all_categories, fnv1a, mix_seed};
use crate::error::{Error, Result};

pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";
pub const SKETCH_FILE: &str = "sketches.ndjson";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    /// Total scene count, divided between train and test.
    pub n_scenes: usize,
    /// Query sketches per category.
    pub n_sketches: usize,
    pub n_unseen: usize,
    pub test_fraction: f64,
    /// Sketch noise is drawn uniformly from `[0, max_sketch_noise]`.
    pub max_sketch_noise: f64,
    pub scene: SceneConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 2000,
            n_sketches: 100,
            n_unseen: 2,
            test_fraction: 0.2,
            max_sketch_noise: 0.6,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: CategorySplit,
    /// Scenes containing only seen categories.
    pub train: Vec<ArchivedScene>,
    /// Scenes drawn from every category.
    pub test: Vec<ArchivedScene>,
    pub sketches: Vec<StrokeSketch>,
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.n_scenes < 2 {
        return Err(Error::validation("n_scenes", "need at least 2 scenes"));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::validation("test_fraction", "must be in [0,1)"));
    }
    let all = all_categories();
    let split = split_categories(&all, spec.seed, spec.n_unseen)?;
    let n_test = ((spec.n_scenes as f64 * spec.test_fraction).round() as usize).clamp(1, spec.n_scenes - 1);
    let n_train = spec.n_scenes - n_test;
    let scenes = |tag: &str, stream: u64, n: usize, cats| -> Result<Vec<ArchivedScene>> {
        (0..n)
            .map(|i| {
                let seed = mix_seed(&[spec.seed, stream, i as u64]);
                Ok(ArchivedScene {
                    id: format!("{tag}-{i:05}"),
                    seed,
                    scene: generate_scene(seed, cats, &spec.scene)?,
                })
            })
            .collect()
    };
    let train = scenes("train", 1, n_train, &split.seen)?;
    let test = scenes("test", 2, n_test, &all)?;
    let mut sketches = Vec::with_capacity(all.len() * spec.n_sketches);
    for c in &all {
        for j in 0..spec.n_sketches {
            let seed = mix_seed(&[spec.seed, 3, fnv1a(c.as_bytes()), j as u64]);
            let noise = ChaCha8Rng::seed_from_u64(seed).random_range(0.0..=spec.max_sketch_noise);
            sketches.push(generate_sketch(seed, c, noise)?);
        }
    }
    Ok(Dataset {
        split,
        train,
        test,
        sketches,
    })
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    write_archive(&dir.join(TRAIN_DIR), &data.train)?;
    write_archive(&dir.join(TEST_DIR), &data.test)?;
    let sk = dir.join(SKETCH_FILE);
    std::fs::write(&sk, serialize_stroke_file(&data.sketches)).map_err(|e| Error::io(&sk, e))?;
    let sp = dir.join(SPLIT_FILE);
    let json = serde_json::to_string_pretty(&data.split)?;
    std::fs::write(&sp, json + "\n").map_err(|e| Error::io(&sp, e))
}

pub fn read_split(dir: &Path) -> Result<CategorySplit> {
    let sp = dir.join(SPLIT_FILE);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads the whole directory. Sketches come back in their stroke-file
/// (normalized, quantized) form.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let sk = dir.join(SKETCH_FILE);
    let bytes = std::fs::read(&sk).map_err(|e| Error::io(&sk, e))?;
    Ok(Dataset {
        split: read_split(dir)?,
        train: read_archive(&dir.join(TRAIN_DIR))?,
        test: read_archive(&dir.join(TEST_DIR))?,
        sketches: parse_stroke_file(&bytes)?.sketches,
    })
}
