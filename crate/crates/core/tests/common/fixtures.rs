//! On-disk fixtures for the CLI and service tests: a small checkpoint, a
//! scene PNG and a stroke file.

use std::path::{Path, PathBuf};

use sketchloc::model::{Model, ModelConfig, Stage};
use sketchloc::synthdata::archive::encode_png;
use sketchloc::synthdata::strokefile::StrokeRecord;
use sketchloc::synthdata::{all_categories, generate_scene, generate_sketch, Scene, SceneConfig};
use sketchloc::training::{save_checkpoint, Checkpoint};

pub struct Fixture {
    pub ckpt: PathBuf,
    pub digest: String,
    pub image: PathBuf,
    pub scene: Scene,
    pub sketch_file: PathBuf,
    pub records: Vec<StrokeRecord>,
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        image_channels: vec![4, 6, 8],
        sketch_channels: vec![4, 8],
        rpn_channels: 8,
        theta_hidden: 8,
        sketch_size: 32,
        ..ModelConfig::default()
    }
}

pub fn build(dir: &Path, stage: Stage) -> Fixture {
    let model = Model::<f32>::new(small_config(), stage, 3).unwrap();
    let ckpt = Checkpoint::from_model(&model, vec!["disc".into(), "ring".into(), "star".into()], None);
    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &ckpt).unwrap();

    let scene = generate_scene(8, &all_categories(), &SceneConfig::default()).unwrap();
    let image = dir.join("scene.png");
    std::fs::write(&image, encode_png(&scene.image).unwrap()).unwrap();

    let cat = scene.objects[0].category.clone();
    let records: Vec<StrokeRecord> = (0..2)
        .map(|i| StrokeRecord::from_sketch(&generate_sketch(40 + i, &cat, 0.3).unwrap()))
        .collect();
    let sketch_file = dir.join("query.ndjson");
    let lines: String = records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(&sketch_file, lines).unwrap();

    Fixture {
        ckpt: ckpt_path,
        digest: ckpt.digest(),
        image,
        scene,
        sketch_file,
        records,
    }
}
