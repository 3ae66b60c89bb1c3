//! Desk-scale training run, multi-query analogue and determinism checks.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use sketchloc::evaluation::{evaluate, EvalOptions, EvalReport};
use sketchloc::model::{Fusion, InferenceOptions, Model, ModelConfig, Stage};
use sketchloc::synthdata::{build_dataset, Dataset, DatasetSpec, Scene};
use sketchloc::training::{run_stage, StageInit, TrainConfig, TrainSample, TrainingSet};

use super::Outcome;

/// Settings of the calibration experiment: 6 seen + 2 unseen categories,
/// 2,000 scenes, two training stages.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub n_scenes: usize,
    pub n_sketches: usize,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2_epochs: usize,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            n_scenes: 2000,
            n_sketches: 100,
            model: ModelConfig::default(),
            stage1: TrainConfig::default(),
            stage2_epochs: TrainConfig::default().epochs,
        }
    }
}

impl Calibration {
    /// The configuration the acceptance run uses.
    pub fn acceptance() -> Self {
        let model = ModelConfig {
            block_depth: 2,
            ..ModelConfig::default()
        };
        Self {
            model,
            // constant lr: at 8 epochs per stage a step decay only cost accuracy
            stage1: TrainConfig {
                epochs: 8,
                decay_every: 1000,
                ..TrainConfig::default()
            },
            stage2_epochs: 8,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub untrained_seen: f64,
    pub stage1_seen: f64,
    pub stage1_unseen: f64,
    pub stage2_seen: f64,
    pub stage2_unseen: f64,
    pub no_mr_seen: f64,
    /// Wall time of stage 1 + stage 2 training.
    pub two_stage_secs: f64,
    pub data: Dataset,
    pub stage2: Model<f32>,
}

fn training_set(data: &Dataset, sketch_size: usize) -> (TrainingSet, Vec<String>) {
    let seen: Vec<String> = data.split.seen.iter().cloned().collect();
    let samples = data
        .train
        .iter()
        .map(|s| TrainSample {
            image: s.scene.image.clone(),
            objects: s.scene.objects.clone(),
        })
        .collect();
    (TrainingSet::new(samples, seen.clone(), &data.sketches, sketch_size).unwrap(), seen)
}

pub fn test_scenes(data: &Dataset) -> Vec<Scene> {
    data.test.iter().map(|s| s.scene.clone()).collect()
}

fn ap50(model: &Model<f32>, data: &Dataset, seen: &[String], opts: &EvalOptions) -> EvalReport {
    evaluate(model, &test_scenes(data), &data.split, seen, opts, &InferenceOptions::default()).unwrap()
}

pub fn run_seed(cal: &Calibration, seed: u64) -> SeedRun {
    let data = build_dataset(&DatasetSpec {
        seed,
        n_scenes: cal.n_scenes,
        n_sketches: cal.n_sketches,
        ..DatasetSpec::default()
    })
    .unwrap();
    let (set, seen) = training_set(&data, cal.model.sketch_size);
    let eval = EvalOptions {
        seed,
        ..EvalOptions::default()
    };

    let untrained = Model::<f32>::new(cal.model.clone(), Stage::WithAttention, seed).unwrap();
    let untrained_seen = ap50(&untrained, &data, &seen, &eval).seen.ap50.unwrap_or(0.0);

    let s1cfg = TrainConfig {
        seed,
        stage: Stage::NoAttention,
        ..cal.stage1.clone()
    };
    let t = Instant::now();
    let s1 = run_stage(StageInit::Fresh(cal.model.clone()), &set, &s1cfg, |_| {}).unwrap();
    let s2cfg = TrainConfig {
        stage: Stage::WithAttention,
        epochs: cal.stage2_epochs,
        ..s1cfg.clone()
    };
    let ckpt = s1.checkpoint(seen.clone());
    let s2 = run_stage(StageInit::Resume(ckpt), &set, &s2cfg, |_| {}).unwrap();
    let two_stage_secs = t.elapsed().as_secs_f64();

    let r1 = ap50(&s1.model, &data, &seen, &eval);
    let r2 = ap50(&s2.model, &data, &seen, &eval);

    let mut nomr = s1cfg.clone();
    nomr.loss.weights.margin_rank = 0.0;
    let ablated = run_stage(StageInit::Fresh(cal.model.clone()), &set, &nomr, |_| {}).unwrap();
    let r3 = ap50(&ablated.model, &data, &seen, &eval);

    SeedRun {
        seed,
        untrained_seen,
        stage1_seen: r1.seen.ap50.unwrap_or(0.0),
        stage1_unseen: r1.unseen.ap50.unwrap_or(0.0),
        stage2_seen: r2.seen.ap50.unwrap_or(0.0),
        stage2_unseen: r2.unseen.ap50.unwrap_or(0.0),
        no_mr_seen: r3.seen.ap50.unwrap_or(0.0),
        two_stage_secs,
        data,
        stage2: s2.model,
    }
}

impl SeedRun {
    pub fn summary(&self) -> String {
        format!(
            "seed {}: untrained seen {:.3} | stage1 seen {:.3} unseen {:.3} | stage2 seen {:.3} unseen {:.3} | no-MR seen {:.3} | two-stage {:.0}s",
            self.seed,
            self.untrained_seen,
            self.stage1_seen,
            self.stage1_unseen,
            self.stage2_seen,
            self.stage2_unseen,
            self.no_mr_seen,
            self.two_stage_secs
        )
    }
}

fn majority(runs: &[SeedRun], f: impl Fn(&SeedRun) -> bool) -> (usize, bool) {
    let wins = runs.iter().filter(|r| f(r)).count();
    (wins, 2 * wins > runs.len())
}

/// Criteria (a), (b), (c) and the time budget over the given seeds.
pub fn calibration_outcomes(runs: &[SeedRun]) -> Vec<Outcome> {
    let n = runs.len();
    let enough = n >= 3;
    let gains: Vec<String> = runs.iter().map(|r| format!("{:+.3}", r.stage2_seen - r.untrained_seen)).collect();
    let all_gain = runs.iter().all(|r| r.stage2_seen - r.untrained_seen >= 0.4);
    let slowest = runs.iter().map(|r| r.two_stage_secs).fold(0.0, f64::max);
    let (b_wins, b_major) = majority(runs, |r| r.stage2_unseen > r.stage1_unseen);
    let (c_wins, c_major) = majority(runs, |r| r.no_mr_seen < r.stage1_seen);
    vec![
        Outcome {
            name: "calibration (a) seen AP@50 gain >= 0.4 over untrained",
            pass: enough && all_gain,
            detail: format!("gains per seed [{}]", gains.join(", ")),
        },
        Outcome {
            name: "calibration (b) stage 2 beats stage 1 on unseen",
            pass: enough && b_major,
            detail: format!(
                "{b_wins}/{n} seeds; unseen stage1 -> stage2: {}",
                runs.iter()
                    .map(|r| format!("{:.3}->{:.3}", r.stage1_unseen, r.stage2_unseen))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        },
        Outcome {
            name: "calibration (c) no margin-rank lowers seen AP@50",
            pass: enough && c_major,
            detail: format!(
                "{c_wins}/{n} seeds; seen full vs no-MR: {}",
                runs.iter()
                    .map(|r| format!("{:.3} vs {:.3}", r.stage1_seen, r.no_mr_seen))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        },
        Outcome {
            name: "calibration two-stage training <= 30 min",
            pass: enough && slowest <= 1800.0,
            detail: format!("slowest seed {slowest:.0}s"),
        },
    ]
}

/// Mean AP@50 over all categories of the split for `n` fused queries at
/// sketch noise 0.6, one value per evaluation seed.
pub fn multi_query_aps(model: &Model<f32>, data: &Dataset, n: usize, fusion: Fusion, seeds: &[u64]) -> Vec<f64> {
    let scenes = test_scenes(data);
    let trained: Vec<String> = data.split.seen.iter().cloned().collect();
    seeds
        .iter()
        .map(|&seed| {
            let opts = EvalOptions {
                n_queries: n,
                fusion,
                noise: 0.6,
                seed,
                categories: Vec::new(),
            };
            let r = evaluate(model, &scenes, &data.split, &trained, &opts, &InferenceOptions::default()).unwrap();
            r.all.ap50.unwrap_or(0.0)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn multi_query(model: &Model<f32>, data: &Dataset, seeds: &[u64]) -> Outcome {
    let single = mean(&multi_query_aps(model, data, 1, Fusion::Feature, seeds));
    let mut parts = vec![format!("N=1 {single:.3}")];
    let mut modes_ok = Vec::new();
    for fusion in [Fusion::Feature, Fusion::Attention] {
        let mut ok = true;
        for n in [3, 5] {
            let m = mean(&multi_query_aps(model, data, n, fusion, seeds));
            ok &= m >= single;
            parts.push(format!("{fusion:?} N={n} {m:.3}"));
        }
        if ok {
            modes_ok.push(format!("{fusion:?}"));
        }
    }
    Outcome {
        name: "multi-query N=3,5 >= N=1 at noise 0.6",
        pass: seeds.len() >= 5 && !modes_ok.is_empty(),
        detail: format!(
            "{} eval seeds, mean AP@50: {}; satisfied by [{}]",
            seeds.len(),
            parts.join(", "),
            modes_ok.join(", ")
        ),
    }
}

// ---------------------------------------------------------------- determinism

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_sketchloc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run sketchloc");
    assert!(
        out.status.success(),
        "sketchloc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Tiny architecture used by the CLI-level tests.
pub const TINY_MODEL: &str = r#"{
  "image_channels": [4, 6, 8],
  "sketch_channels": [4, 8],
  "rpn_channels": 8,
  "theta_hidden": 8,
  "sketch_size": 32
}"#;

/// Two fixed-seed invocations of `train` and `evaluate`; compares the
/// metrics logs, checkpoints and reports byte for byte.
pub fn determinism(dir: &Path) -> Outcome {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = dir.join("data");
    let mcfg = dir.join("model.json");
    std::fs::write(&mcfg, TINY_MODEL).unwrap();
    cli(&["generate-data", "--seed", "5", "--n-scenes", "30", "--n-sketches", "4", "--out", &s(&data)]);
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        cli(&[
            "train", "--data", &s(&data), "--out", &s(&out), "--stage", "1", "--epochs", "1", "--seed", "9",
            "--model-config", &s(&mcfg),
        ]);
        cli(&[
            "train", "--data", &s(&data), "--out", &s(&out), "--stage", "2", "--epochs", "1",
            "--resume", &s(&out.join("stage1.ckpt")),
        ]);
        files.push(out);
    }
    let ckpt = files[0].join("stage2.ckpt");
    for report in ["r1.json", "r2.json"] {
        cli(&[
            "evaluate", "--ckpt", &s(&ckpt), "--data", &s(&data), "--n-queries", "2", "--seed", "3", "--report",
            &s(&dir.join(report)),
        ]);
    }
    let mut diffs = Vec::new();
    for name in ["stage1_metrics.csv", "stage2_metrics.csv", "stage1.ckpt", "stage2.ckpt"] {
        let a = std::fs::read(files[0].join(name)).unwrap();
        let b = std::fs::read(files[1].join(name)).unwrap();
        if a != b || a.is_empty() {
            diffs.push(name.to_string());
        }
    }
    let r1 = std::fs::read(dir.join("r1.json")).unwrap();
    if r1 != std::fs::read(dir.join("r2.json")).unwrap() || r1.is_empty() {
        diffs.push("evaluation report".into());
    }
    Outcome {
        name: "determinism",
        pass: diffs.is_empty(),
        detail: if diffs.is_empty() {
            "metrics logs, checkpoints and reports byte-identical across two invocations".into()
        } else {
            format!("differing: {}", diffs.join(", "))
        },
    }
}
