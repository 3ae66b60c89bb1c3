//! Synthetic scenes, templated stroke sketches, the stroke-file codec and
//! category splits.

pub mod archive;
pub mod dataset;
pub mod raster;
pub mod scene;
pub mod sketch;
pub mod split;
pub mod strokefile;

pub use dataset::{build_dataset, read_dataset, write_dataset, Dataset, DatasetSpec};
pub use raster::{prepare_query, rasterize_sketch, RasterSketch};
pub use scene::{generate_scene, RgbImage, Scene, SceneConfig, SceneObject, ShapeInstance};
pub use sketch::{generate_sketch, template, Point, StrokeSketch};
pub use split::{split_categories, CategorySplit};
pub use strokefile::{parse_stroke_file, serialize_stroke_file, ParsedStrokes};

/// The built-in shape categories, in canonical order.
pub const CATEGORIES: [&str; 8] = [
    "disc", "square", "triangle", "diamond", "star", "cross", "ring", "crescent",
];

pub fn all_categories() -> std::collections::BTreeSet<String> {
    CATEGORIES.iter().map(|s| s.to_string()).collect()
}

pub(crate) fn known_categories() -> String {
    CATEGORIES.join(", ")
}

/// Stable 64-bit FNV-1a, used to derive per-category RNG streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Mixes several integers into one seed (splitmix64 finaliser per step).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
