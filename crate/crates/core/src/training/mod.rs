//! SGD with momentum, the step learning-rate schedule, two-stage training and
//! checkpoints.

mod checkpoint;
mod dataset;

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{TrainSample, TrainingSet};

use crate::error::{Error, Result};
use crate::model::{Fusion, Model, ModelConfig, SampleOptions, Stage};
use crate::params::ParamRegistry;
use crate::real::Real;
use crate::scoring::{LossBreakdown, LossConfig, Reduction};
use crate::synthdata::mix_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    /// Samples per optimizer step (gradients are averaged over them).
    pub batch_size: usize,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub stage: Stage,
    pub seed: u64,
    pub loss: LossConfig,
    /// Probability of querying a category absent from the scene.
    pub background_query_prob: f64,
    pub add_gt_proposals: bool,
    pub rpn_class_filter: bool,
    /// Stage 2 must start from a stage-1 checkpoint.
    pub incremental: bool,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            batch_size: 10,
            lr_decay: 0.1,
            decay_every: 4,
            epochs: 30,
            stage: Stage::NoAttention,
            seed: 0,
            loss: LossConfig {
                reduction: Reduction::Mean,
                ..LossConfig::default()
            },
            background_query_prob: 0.0,
            add_gt_proposals: true,
            rpn_class_filter: false,
            incremental: true,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("batch_size", self.batch_size as f64),
            ("decay_every", self.decay_every as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(name, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum", format!("must be in [0,1), got {}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.background_query_prob) {
            return Err(Error::validation("background_query_prob", "must be in [0,1]"));
        }
        Ok(())
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            loss: self.loss,
            add_gt_proposals: self.add_gt_proposals,
            rpn_class_filter: self.rpn_class_filter,
            fusion: Fusion::Feature,
            ..SampleOptions::default()
        }
    }
}

/// `lr0 · decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub velocity: ParamRegistry<F>,
    pub step: u64,
    pub lr: f64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &ParamRegistry<F>) -> Self {
        Self {
            velocity: params.zeros_like(),
            step: 0,
            lr: 0.0,
        }
    }
}

/// Classic momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_step<F: Real>(
    params: &mut ParamRegistry<F>,
    grads: &ParamRegistry<F>,
    state: &mut OptimizerState<F>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Shape("parameter, gradient and velocity registries differ".into()));
    }
    for (p, g) in params.entries().iter().zip(grads.entries()) {
        if p.shape != g.shape || p.name != g.name {
            return Err(Error::Shape(format!("gradient for {} does not match {}", g.name, p.name)));
        }
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    let (lr, mu) = (F::c(lr), F::c(momentum));
    for ((p, g), v) in params
        .entries_mut()
        .iter_mut()
        .zip(grads.entries())
        .zip(state.velocity.entries_mut())
    {
        for ((pi, &gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *vi = mu * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    state.step += 1;
    state.lr = lr.as_f64();
    Ok(())
}

/// One optimizer step's averaged loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const METRICS_HEADER: &str = "step,lr,margin,margin_rank,ce,box,rpn_obj,rpn_box,total";

impl StepLog {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        let mut s = String::new();
        write!(
            s,
            "{},{:.6e},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            self.step, self.lr, l.margin, l.margin_rank, l.cross_entropy, l.box_reg, l.rpn_objectness, l.rpn_box, l.total
        )
        .expect("string write");
        s
    }
}

pub fn metrics_csv(log: &[StepLog]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for l in log {
        out.push_str(&l.csv_line());
        out.push('\n');
    }
    out
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown, s: f64) {
    acc.margin += s * b.margin;
    acc.margin_rank += s * b.margin_rank;
    acc.cross_entropy += s * b.cross_entropy;
    acc.box_reg += s * b.box_reg;
    acc.rpn_objectness += s * b.rpn_objectness;
    acc.rpn_box += s * b.rpn_box;
    acc.total += s * b.total;
}

fn global_norm<F: Real>(grads: &ParamRegistry<F>) -> f64 {
    grads
        .entries()
        .iter()
        .flat_map(|p| p.data.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Picks the query category of a training sample: usually one present in
/// the scene, sometimes (with `background_query_prob`) one that is absent.
pub fn sample_query<R: Rng>(sample: &TrainSample, categories: &[String], bg_prob: f64, rng: &mut R) -> Option<String> {
    let present: Vec<&String> = categories.iter().filter(|c| sample.objects.iter().any(|o| &o.category == *c)).collect();
    let absent: Vec<&String> = categories.iter().filter(|c| !present.contains(c)).collect();
    let want_bg = rng.random_bool(bg_prob);
    let pool = if (want_bg && !absent.is_empty()) || present.is_empty() { &absent } else { &present };
    pool.choose(rng).map(|c| (*c).clone())
}

/// Runs `cfg.epochs` epochs of training on `model`, continuing `state`.
/// `on_step` sees every optimizer step as it happens.
pub fn train<F: Real>(
    model: &mut Model<F>,
    state: &mut OptimizerState<F>,
    data: &TrainingSet,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::validation("dataset", "training set is empty"));
    }
    if model.stage() != cfg.stage {
        return Err(Error::Config(format!(
            "model is stage {} but the configuration asks for stage {}",
            model.stage().number(),
            cfg.stage.number()
        )));
    }
    let opts = cfg.sample_options();
    let mut grads = model.params().zeros_like();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64])));
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let mut acc = LossBreakdown::default();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, idx as u64, 0x5a]));
                let sample = data.sample(idx);
                let Some(query) = sample_query(sample, data.categories(), cfg.background_query_prob, &mut rng) else {
                    continue;
                };
                let sketch = data.pick_sketch(&query, &mut rng)?;
                let b = model.train_sample(
                    &sample.image,
                    std::slice::from_ref(sketch),
                    &sample.objects,
                    &query,
                    &opts,
                    &mut rng,
                    &mut grads,
                )?;
                add_breakdown(&mut acc, &b, scale);
            }
            grads.scale(F::c(scale));
            if let Some(max) = cfg.clip_norm {
                let norm = global_norm(&grads);
                if norm > max {
                    grads.scale(F::c(max / norm));
                }
            }
            sgd_step(model.params_mut(), &grads, state, lr, cfg.momentum)?;
            let entry = StepLog {
                step: state.step,
                epoch,
                lr,
                loss: acc,
            };
            on_step(&entry);
            log.push(entry);
        }
    }
    Ok(log)
}

/// Where a training stage starts from.
#[derive(Clone, Debug)]
pub enum StageInit {
    Fresh(ModelConfig),
    Resume(Checkpoint),
}

#[derive(Clone, Debug)]
pub struct StageRun {
    pub model: Model<f32>,
    pub optimizer: OptimizerState<f32>,
    pub log: Vec<StepLog>,
    /// Parameters that did not come from the resumed checkpoint.
    pub fresh_params: Vec<String>,
}

impl StageRun {
    pub fn checkpoint(&self, categories: Vec<String>) -> Checkpoint {
        Checkpoint::from_model(&self.model, categories, Some(self.optimizer.clone()))
    }
}

/// Builds the model for `cfg.stage` and trains it. A checkpoint of the same
/// stage is continued, optimizer state included; a stage-1 checkpoint seeds
/// a stage-2 model by parameter name with a fresh optimizer.
pub fn run_stage(init: StageInit, data: &TrainingSet, cfg: &TrainConfig, on_step: impl FnMut(&StepLog)) -> Result<StageRun> {
    let (mut model, mut optimizer, fresh_params) = match init {
        StageInit::Fresh(config) => {
            if cfg.stage == Stage::WithAttention && cfg.incremental {
                return Err(Error::Config(
                    "stage 2 trains incrementally and needs a stage-1 checkpoint to resume from".into(),
                ));
            }
            let model = Model::new(config, cfg.stage, cfg.seed)?;
            let opt = OptimizerState::new(model.params());
            let names = model.params().names().map(str::to_string).collect();
            (model, opt, names)
        }
        StageInit::Resume(ckpt) if ckpt.stage == cfg.stage => {
            let model = ckpt.to_model()?;
            let opt = match ckpt.optimizer {
                Some(o) => o,
                None => OptimizerState::new(model.params()),
            };
            (model, opt, Vec::new())
        }
        StageInit::Resume(ckpt) if ckpt.stage == Stage::NoAttention => {
            let (model, fresh) = Model::from_registry(ckpt.config.clone(), cfg.stage, cfg.seed, &ckpt.params)?;
            let opt = OptimizerState::new(model.params());
            (model, opt, fresh)
        }
        StageInit::Resume(ckpt) => {
            return Err(Error::Config(format!(
                "cannot train stage {} from a stage-{} checkpoint",
                cfg.stage.number(),
                ckpt.stage.number()
            )))
        }
    };
    let log = train(&mut model, &mut optimizer, data, cfg, on_step)?;
    Ok(StageRun {
        model,
        optimizer,
        log,
        fresh_params,
    })
}
