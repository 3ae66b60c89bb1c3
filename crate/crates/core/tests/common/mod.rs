//! Criterion checks shared by the per-area test files and the `acceptance`
//! target. Every check returns an [`Outcome`] instead of panicking so the
//! acceptance run can report all criteria before failing.
#![allow(dead_code)]

pub mod calibration;
pub mod fixtures;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sketchloc::attention::{
    apply_attention, apply_attention_backward, attention_fusion, attention_fusion_backward, compatibility_map,
    compatibility_map_backward, feature_fusion, feature_fusion_backward, feature_fusion_with_winners,
    fuse_and_project, fuse_and_project_backward, CompatibilityMap, Projection, QueryBundle,
};
use sketchloc::encoders::{global_max_pool_with_argmax, ConvEncoder, Transform};
use sketchloc::evaluation::compute_ap;
use sketchloc::gradcheck::{check_params, check_vector, GradCheckReport};
use sketchloc::model::{Detection, Fusion, Model, ModelConfig, SampleOptions, Stage};
use sketchloc::nn::Init;
use sketchloc::proposals::{iou, nms, roi_pool, roi_pool_backward, BBox, RpnHead, RpnTargets};
use sketchloc::scoring::{
    bce_with_logits, margin_loss, margin_loss_grad, margin_rank_loss, margin_rank_loss_grad, smooth_l1, total_loss,
    HeadPredictions, LossConfig, LossWeights, Reduction, ScoringHead, DEFAULT_M_MINUS, DEFAULT_M_PLUS,
    SMOOTH_L1_BETA,
};
use sketchloc::synthdata::{generate_scene, generate_sketch, prepare_query, SceneConfig};
use sketchloc::{FeatureMap, FeatureVector, ParamRegistry};

pub const GRAD_TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

// ---------------------------------------------------------------- helpers

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize, stride: usize) -> FeatureMap<f64> {
    FeatureMap::new(d, h, w, stride, uniform(rng, d * h * w)).unwrap()
}

fn like(map: &FeatureMap<f64>, data: &[f64]) -> FeatureMap<f64> {
    FeatureMap::new(map.depth(), map.height(), map.width(), map.stride(), data.to_vec()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Moves zero biases off the ReLU kink so finite differences are meaningful.
fn jitter_biases(reg: &mut ParamRegistry<f64>, rng: &mut ChaCha8Rng) {
    for p in reg.entries_mut() {
        if p.name.ends_with(".bias") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
}

// ---------------------------------------------------------------- gradients

pub type GradCase = (String, GradCheckReport);

fn encoder_case(rng: &mut ChaCha8Rng, prefix: &str, cin: usize, size: usize) -> GradCase {
    let mut reg = ParamRegistry::<f64>::new();
    let enc = ConvEncoder::register(&mut reg, prefix, cin, &[4, 6, 8], 2, rng).unwrap();
    jitter_biases(&mut reg, rng);
    let x = rand_map(rng, cin, size, size, 1);
    let (out, cache) = enc.forward(&reg, &x).unwrap();
    let r = uniform(rng, out.data().len());
    let mut grads = reg.zeros_like();
    enc.backward(&reg, &cache, &like(&out, &r), &mut grads);
    let mut p = reg.clone();
    let rep = check_params(&mut p, &grads, EPS, 0, |p| dot(enc.forward(p, &x).unwrap().0.data(), &r));
    (format!("{prefix} encoder params"), rep)
}

fn transform_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut reg = ParamRegistry::<f64>::new();
    let psi = Transform::register(&mut reg, "psi", 8, Init::FanIn, rng).unwrap();
    jitter_biases(&mut reg, rng);
    let x = rand_map(rng, 8, 5, 5, 8);
    let (out, cache) = psi.forward(&reg, &x).unwrap();
    let r = uniform(rng, out.data().len());
    let mut grads = reg.zeros_like();
    let dx = psi.backward(&reg, &cache, &like(&out, &r), &mut grads);
    let mut p = reg.clone();
    let params = check_params(&mut p, &grads, EPS, 0, |p| dot(psi.forward(p, &x).unwrap().0.data(), &r));
    let mut xv = x.data().to_vec();
    let input = check_vector(&mut xv, dx.data(), EPS, |v| dot(psi.forward(&reg, &like(&x, v)).unwrap().0.data(), &r));
    vec![("psi params".into(), params), ("psi input".into(), input)]
}

fn gmp_case(rng: &mut ChaCha8Rng) -> GradCase {
    let x = rand_map(rng, 8, 4, 4, 8);
    let r = uniform(rng, 8);
    let (_, argmax) = global_max_pool_with_argmax(&x);
    let mut analytic = vec![0.0; x.data().len()];
    for (&i, &g) in argmax.iter().zip(&r) {
        analytic[i] = g;
    }
    let mut xv = x.data().to_vec();
    let rep = check_vector(&mut xv, &analytic, EPS, |v| dot(&global_max_pool_with_argmax(&like(&x, v)).0 .0, &r));
    ("global max pool".into(), rep)
}

fn compatibility_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let k = 4.0;
    let psi = rand_map(rng, 8, 4, 4, 8);
    let g = uniform(rng, 8);
    let r = uniform(rng, 16);
    let (dimg, dg) = compatibility_map_backward(&psi, &FeatureVector(g.clone()), k, &r);
    let mut xv = psi.data().to_vec();
    let a = check_vector(&mut xv, dimg.data(), EPS, |v| {
        dot(&compatibility_map(&like(&psi, v), &FeatureVector(g.clone()), k).unwrap().scores, &r)
    });
    let mut gv = g.clone();
    let b = check_vector(&mut gv, &dg, EPS, |v| {
        dot(&compatibility_map(&psi, &FeatureVector(v.to_vec()), k).unwrap().scores, &r)
    });
    vec![("compatibility wrt image".into(), a), ("compatibility wrt sketch".into(), b)]
}

fn cmap_from(scores: &[f64], h: usize, w: usize) -> CompatibilityMap<f64> {
    CompatibilityMap {
        height: h,
        width: w,
        k: 1.0,
        scores: scores.to_vec(),
    }
}

fn attention_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let phi = rand_map(rng, 8, 4, 4, 8);
    let s = uniform(rng, 16);
    let r = uniform(rng, phi.data().len());
    let (dphi, ds) = apply_attention_backward(&phi, &cmap_from(&s, 4, 4), &like(&phi, &r));
    let mut pv = phi.data().to_vec();
    let a = check_vector(&mut pv, dphi.data(), EPS, |v| {
        dot(apply_attention(&like(&phi, v), &cmap_from(&s, 4, 4)).unwrap().data(), &r)
    });
    let mut sv = s.clone();
    let b = check_vector(&mut sv, &ds, EPS, |v| dot(apply_attention(&phi, &cmap_from(v, 4, 4)).unwrap().data(), &r));
    vec![("attention wrt features".into(), a), ("attention wrt scores".into(), b)]
}

fn projection_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut reg = ParamRegistry::<f64>::new();
    let proj = Projection::register(&mut reg, "proj", 8, rng).unwrap();
    jitter_biases(&mut reg, rng);
    let att = rand_map(rng, 8, 4, 4, 8);
    let orig = rand_map(rng, 8, 4, 4, 8);
    let (out, cache) = fuse_and_project(&reg, &proj, &att, &orig).unwrap();
    let r = uniform(rng, out.data().len());
    let mut grads = reg.zeros_like();
    let (datt, dorig) = fuse_and_project_backward(&reg, &proj, &cache, &like(&out, &r), &mut grads);
    let f = |reg: &ParamRegistry<f64>, a: &FeatureMap<f64>, o: &FeatureMap<f64>| {
        dot(fuse_and_project(reg, &proj, a, o).unwrap().0.data(), &r)
    };
    let mut p = reg.clone();
    let params = check_params(&mut p, &grads, EPS, 0, |p| f(p, &att, &orig));
    let mut av = att.data().to_vec();
    let a = check_vector(&mut av, datt.data(), EPS, |v| f(&reg, &like(&att, v), &orig));
    let mut ov = orig.data().to_vec();
    let o = check_vector(&mut ov, dorig.data(), EPS, |v| f(&reg, &att, &like(&orig, v)));
    vec![
        ("projection params".into(), params),
        ("projection wrt attended".into(), a),
        ("projection wrt original".into(), o),
    ]
}

fn fusion_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let maps: Vec<_> = (0..3).map(|_| rand_map(rng, 8, 3, 3, 32)).collect();
    let qb = QueryBundle::new(maps.clone()).unwrap();
    let (out, winners) = feature_fusion_with_winners(&qb);
    let r = uniform(rng, out.data().len());
    let dmaps = feature_fusion_backward(&qb, &winners, &like(&out, &r));
    let mut cases = Vec::new();
    for (m, dm) in dmaps.iter().enumerate() {
        let mut xv = maps[m].data().to_vec();
        let rep = check_vector(&mut xv, dm.data(), EPS, |v| {
            let mut ms = maps.clone();
            ms[m] = like(&maps[m], v);
            dot(feature_fusion(&QueryBundle::new(ms).unwrap()).data(), &r)
        });
        cases.push((format!("feature fusion wrt query {m}"), rep));
    }
    let cmaps: Vec<_> = (0..3).map(|_| cmap_from(&uniform(rng, 16), 4, 4)).collect();
    let rs = uniform(rng, 16);
    let d = attention_fusion_backward::<f64>(3, &rs);
    let mut sv = cmaps[1].scores.clone();
    let rep = check_vector(&mut sv, &d, EPS, |v| {
        let mut cs = cmaps.clone();
        cs[1] = cmap_from(v, 4, 4);
        dot(&attention_fusion(&cs).unwrap().scores, &rs)
    });
    cases.push(("attention fusion".into(), rep));
    cases
}

fn rpn_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut reg = ParamRegistry::<f64>::new();
    let head = RpnHead::register(&mut reg, 8, 6, 3, rng).unwrap();
    jitter_biases(&mut reg, rng);
    let map = rand_map(rng, 8, 4, 4, 8);
    let (out, cache) = head.forward(&reg, &map);
    let rl = uniform(rng, out.logits.len());
    let rd: Vec<[f64; 4]> = (0..out.deltas.len()).map(|_| uniform(rng, 4).try_into().unwrap()).collect();
    let f = |reg: &ParamRegistry<f64>, m: &FeatureMap<f64>| {
        let (o, _) = head.forward(reg, m);
        dot(&o.logits, &rl) + o.deltas.iter().zip(&rd).map(|(a, b)| dot(a, b)).sum::<f64>()
    };
    let mut grads = reg.zeros_like();
    let dmap = head.backward(&reg, &cache, &rl, &rd, &mut grads);
    let mut p = reg.clone();
    let params = check_params(&mut p, &grads, EPS, 0, |p| f(p, &map));
    let mut mv = map.data().to_vec();
    let input = check_vector(&mut mv, dmap.data(), EPS, |v| f(&reg, &like(&map, v)));
    vec![("rpn params".into(), params), ("rpn input".into(), input)]
}

fn roi_case(rng: &mut ChaCha8Rng) -> GradCase {
    let map = rand_map(rng, 8, 6, 6, 8);
    let boxes = vec![
        BBox::new(3.0, 5.0, 40.0, 30.0).unwrap(),
        BBox::new(10.0, 12.0, 22.0, 47.0).unwrap(),
        BBox::new(0.0, 0.0, 48.0, 48.0).unwrap(),
    ];
    let (outs, caches) = roi_pool(&map, &boxes, 2).unwrap();
    let rs: Vec<Vec<f64>> = outs.iter().map(|o| uniform(rng, o.data().len())).collect();
    let gmaps: Vec<_> = outs.iter().zip(&rs).map(|(o, r)| like(o, r)).collect();
    let dmap = roi_pool_backward(&map, &caches, &gmaps);
    let mut mv = map.data().to_vec();
    let rep = check_vector(&mut mv, dmap.data(), EPS, |v| {
        let (o, _) = roi_pool(&like(&map, v), &boxes, 2).unwrap();
        o.iter().zip(&rs).map(|(o, r)| dot(o.data(), r)).sum()
    });
    ("roi pool".into(), rep)
}

fn theta_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut reg = ParamRegistry::<f64>::new();
    let head = ScoringHead::register(&mut reg, 8, 8, Init::FanIn, rng).unwrap();
    jitter_biases(&mut reg, rng);
    let rois: Vec<FeatureVector<f64>> = (0..4).map(|_| FeatureVector(uniform(rng, 8))).collect();
    let sketch = FeatureVector(uniform(rng, 8));
    let (ra, rc) = (uniform(rng, 4), uniform(rng, 4));
    let rd: Vec<[f64; 4]> = (0..4).map(|_| uniform(rng, 4).try_into().unwrap()).collect();
    let f = |reg: &ParamRegistry<f64>, rois: &[FeatureVector<f64>], s: &FeatureVector<f64>| {
        let (o, _) = head.forward(reg, rois, s).unwrap();
        dot(&o.a, &ra) + dot(&o.class_logits, &rc) + o.deltas.iter().zip(&rd).map(|(a, b)| dot(a, b)).sum::<f64>()
    };
    let (out, cache) = head.forward(&reg, &rois, &sketch).unwrap();
    let mut grads = reg.zeros_like();
    let (droi, dsketch) = head.backward(&reg, &cache, &out, &ra, &rc, &rd, &mut grads);
    let mut p = reg.clone();
    let mut cases = vec![("theta params".to_string(), check_params(&mut p, &grads, EPS, 0, |p| f(p, &rois, &sketch)))];
    let mut sv = sketch.0.clone();
    cases.push((
        "theta wrt sketch vector".into(),
        check_vector(&mut sv, &dsketch, EPS, |v| f(&reg, &rois, &FeatureVector(v.to_vec()))),
    ));
    let mut rep = GradCheckReport::default();
    for k in 0..rois.len() {
        let mut rv = rois[k].0.clone();
        rep.merge(check_vector(&mut rv, &droi[k], EPS, |v| {
            let mut rs = rois.clone();
            rs[k] = FeatureVector(v.to_vec());
            f(&reg, &rs, &sketch)
        }));
    }
    cases.push(("theta wrt roi vectors".into(), rep));
    cases
}

/// Scores whose margins and pairwise gaps all sit at least `clear` away from
/// every hinge point of the two ranking losses.
fn scores_off_hinges(rng: &mut ChaCha8Rng, n: usize, clear: f64) -> Vec<f64> {
    loop {
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let single = a.iter().all(|&v| (v - DEFAULT_M_PLUS).abs() > clear && (v - DEFAULT_M_MINUS).abs() > clear);
        let pairs = (0..n).all(|k| {
            (k + 1..n).all(|l| {
                let g = (a[k] - a[l]).abs();
                g > clear && (g - DEFAULT_M_PLUS).abs() > clear && (g - DEFAULT_M_MINUS).abs() > clear
            })
        });
        if single && pairs {
            return a;
        }
    }
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let (mp, mm) = (DEFAULT_M_PLUS, DEFAULT_M_MINUS);
    let n = 6;
    let y: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
    let a = scores_off_hinges(rng, n, 1e-3);
    let mut cases = Vec::new();

    let (_, g) = margin_loss_grad(&a, &y, mp, mm).unwrap();
    let mut av = a.clone();
    cases.push(("margin loss".into(), check_vector(&mut av, &g, EPS, |v| margin_loss(v, &y, mp, mm).unwrap())));
    let (_, g) = margin_rank_loss_grad(&a, &y, mp, mm).unwrap();
    let mut av = a.clone();
    cases.push((
        "margin-rank loss".into(),
        check_vector(&mut av, &g, EPS, |v| margin_rank_loss(v, &y, mp, mm).unwrap()),
    ));

    let mut rep = GradCheckReport::default();
    for z in [-3.0, -0.4, 0.0, 0.7, 5.0] {
        for t in [0u8, 1] {
            let (_, g) = bce_with_logits(z, t);
            rep.merge(check_vector(&mut [z], &[g], EPS, |v| bce_with_logits(v[0], t).0));
        }
    }
    cases.push(("cross-entropy".into(), rep));
    let mut rep = GradCheckReport::default();
    for x in [-2.0, -0.05, 0.03, 0.5] {
        let (_, g) = smooth_l1(x, SMOOTH_L1_BETA);
        rep.merge(check_vector(&mut [x], &[g], EPS, |v| smooth_l1(v[0], SMOOTH_L1_BETA).0));
    }
    cases.push(("smooth-l1".into(), rep));

    // every input of the combined loss at once
    let class = uniform(rng, n);
    let deltas = uniform(rng, 4 * n);
    let targets: Vec<Option<[f64; 4]>> =
        y.iter().map(|&l| (l == 1).then(|| uniform(rng, 4).try_into().unwrap())).collect();
    let m = 5;
    let rpn_logits = uniform(rng, m);
    let rpn_deltas = uniform(rng, 4 * m);
    let rpn = RpnTargets {
        labels: vec![(0, 1), (2, 0), (3, 0), (4, 1)],
        regression: vec![(0, [0.3, -0.2, 0.5, 0.0]), (4, [-0.6, 0.1, 0.2, 0.4])],
    };
    let cfg = LossConfig {
        weights: LossWeights {
            margin: 1.0,
            margin_rank: 0.5,
            cross_entropy: 2.0,
            box_reg: 1.5,
            rpn_objectness: 0.7,
            rpn_box: 1.3,
        },
        reduction: Reduction::Mean,
        ..LossConfig::default()
    };
    let eval = |x: &[f64]| {
        let pred = HeadPredictions {
            a: x[..n].to_vec(),
            class_logits: x[n..2 * n].to_vec(),
            deltas: x[2 * n..6 * n].chunks(4).map(|c| c.try_into().unwrap()).collect(),
        };
        let rd: Vec<[f64; 4]> = x[6 * n + m..].chunks(4).map(|c| c.try_into().unwrap()).collect();
        total_loss(&pred, &y, &targets, &x[6 * n..6 * n + m], &rd, &rpn, &cfg).unwrap()
    };
    let mut x: Vec<f64> = a.iter().chain(&class).chain(&deltas).chain(&rpn_logits).chain(&rpn_deltas).copied().collect();
    let (_, grads) = eval(&x);
    let mut analytic = vec![0.0; x.len()];
    analytic[..n].copy_from_slice(&grads.da);
    analytic[n..2 * n].copy_from_slice(&grads.dclass);
    for (k, d) in grads.ddeltas.iter().enumerate() {
        analytic[2 * n + 4 * k..2 * n + 4 * k + 4].copy_from_slice(d);
    }
    for &(i, g) in &grads.drpn_logits {
        analytic[6 * n + i] += g;
    }
    for &(i, g) in &grads.drpn_deltas {
        for j in 0..4 {
            analytic[6 * n + m + 4 * i + j] += g[j];
        }
    }
    cases.push(("combined loss".into(), check_vector(&mut x, &analytic, EPS, |v| eval(v).0.total)));
    cases
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_channels: vec![4, 6, 8],
        sketch_channels: vec![4, 8],
        block_depth: 1,
        rpn_channels: 6,
        theta_hidden: 8,
        anchor_scales: vec![12.0, 24.0],
        anchor_ratios: vec![1.0, 2.0],
        roi_size: 2,
        k: 4.0,
        sketch_size: 16,
    }
}

/// Whole-model check: the analytic gradient of the training loss against
/// finite differences of full forward passes, sampling every parameter.
fn model_case(stage: Stage, fusion: Fusion, n_queries: usize) -> GradCase {
    let cats: BTreeSet<String> = ["disc", "square", "ring"].iter().map(|s| s.to_string()).collect();
    let scfg = SceneConfig {
        width: 48,
        height: 48,
        min_objects: 2,
        max_objects: 3,
        min_size: 12.0,
        max_size: 24.0,
        ..SceneConfig::default()
    };
    let scene = generate_scene(11, &cats, &scfg).unwrap();
    let query = scene.objects[0].category.clone();
    let sketches: Vec<_> = (0..n_queries as u64)
        .map(|i| prepare_query(&generate_sketch(11 + i, &query, 0.3).unwrap(), 16).unwrap())
        .collect();
    let mut model = Model::<f64>::new(tiny_model_config(), stage, 5).unwrap();
    jitter_biases(model.params_mut(), &mut ChaCha8Rng::seed_from_u64(77));
    let opts = SampleOptions {
        fusion,
        ..SampleOptions::default()
    };
    let trunk = model.forward_trunk(&scene.image, &sketches, fusion).unwrap();
    let plan = model
        .plan_sample(&trunk, &scene.objects, &query, &opts, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let mut grads = model.params().zeros_like();
    model.loss_from_trunk(&trunk, &plan, &opts.loss, Some(&mut grads)).unwrap();
    let mut probe = model.clone();
    let mut params = model.params().clone();
    let rep = check_params(&mut params, &grads, EPS, 6, |p| {
        *probe.params_mut() = p.clone();
        let t = probe.forward_trunk(&scene.image, &sketches, fusion).unwrap();
        probe.loss_from_trunk(&t, &plan, &opts.loss, None).unwrap().total
    });
    (format!("end-to-end {stage:?} {fusion:?} N={n_queries}"), rep)
}

pub fn gradient_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = vec![
        encoder_case(&mut rng, "image", 3, 24),
        encoder_case(&mut rng, "sketch", 1, 16),
        gmp_case(&mut rng),
        roi_case(&mut rng),
    ];
    cases.extend(transform_cases(&mut rng));
    cases.extend(compatibility_cases(&mut rng));
    cases.extend(attention_cases(&mut rng));
    cases.extend(projection_cases(&mut rng));
    cases.extend(fusion_cases(&mut rng));
    cases.extend(rpn_cases(&mut rng));
    cases.extend(theta_cases(&mut rng));
    cases.extend(loss_cases(&mut rng));
    cases.push(model_case(Stage::NoAttention, Fusion::Feature, 1));
    cases.push(model_case(Stage::WithAttention, Fusion::Feature, 2));
    cases.push(model_case(Stage::WithAttention, Fusion::Attention, 2));
    cases
}

pub fn gradient_suite() -> Outcome {
    let t = std::time::Instant::now();
    let cases = gradient_cases();
    let secs = t.elapsed().as_secs_f64();
    let failing: Vec<String> = cases
        .iter()
        .filter(|(_, r)| !r.passes(GRAD_TOL) || r.checked == 0)
        .map(|(n, r)| format!("{n} ({:.2e} at {:?})", r.max_rel_error, r.worst))
        .collect();
    let worst = cases.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let checked: usize = cases.iter().map(|(_, r)| r.checked).sum();
    Outcome {
        name: "gradient suite",
        pass: failing.is_empty() && secs < 120.0,
        detail: format!(
            "{} ops, {checked} coordinates, max rel err {worst:.2e} (< {GRAD_TOL:.0e}), {secs:.1}s (< 120s){}",
            cases.len(),
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    }
}

// ---------------------------------------------------------------- equations

/// `(label, computed, expected)`; expected values are worked out by hand.
pub fn equation_cases() -> Vec<(&'static str, f64, f64)> {
    let mut out = Vec::new();
    let cmap = |d: usize, l: Vec<f64>, g: Vec<f64>, k: f64| {
        let m = FeatureMap::new(d, 1, 1, 1, l).unwrap();
        compatibility_map(&m, &FeatureVector(g), k).unwrap().scores[0]
    };
    out.push(("compatibility: d=256 all ones, K=256", cmap(256, vec![1.0; 256], vec![1.0; 256], 256.0), 1.0));
    out.push(("compatibility: zero sketch vector", cmap(4, vec![3.0, -2.0, 5.0, 1.0], vec![0.0; 4], 4.0), 0.0));
    out.push((
        "compatibility: (1,2,0,-1).(1,1,1,1)/4",
        cmap(4, vec![1.0, 2.0, 0.0, -1.0], vec![1.0; 4], 4.0),
        0.5,
    ));

    let (mp, mm) = (0.3, 0.7);
    out.push(("margin: a=0.9 y=1", margin_loss(&[0.9], &[1], mp, mm).unwrap(), 0.0));
    out.push(("margin: a=0.9 y=0", margin_loss(&[0.9], &[0], mp, mm).unwrap(), 0.2));
    out.push(("margin: a=0.3 y=1 (boundary)", margin_loss(&[0.3], &[1], mp, mm).unwrap(), 0.0));
    out.push(("margin-rank: (0.9,0.1) y=(1,0)", margin_rank_loss(&[0.9, 0.1], &[1, 0], mp, mm).unwrap(), 0.0));
    out.push(("margin-rank: (0.5,0.5) y=(1,0)", margin_rank_loss(&[0.5, 0.5], &[1, 0], mp, mm).unwrap(), 0.3));
    out.push(("margin-rank: (0.5,0.5) y=(1,1)", margin_rank_loss(&[0.5, 0.5], &[1, 1], mp, mm).unwrap(), 0.0));

    // three proposals: margins 0.1 + 0.1; pairs (0,2) 0.3-0.15 and (1,2) 0.75-0.7
    let pred = HeadPredictions {
        a: vec![0.2, 0.8, 0.05],
        class_logits: vec![1.0, 0.0, -1.0],
        deltas: vec![[0.1, 0.0, 0.0, 0.0], [0.0; 4], [0.0; 4]],
    };
    let rpn = RpnTargets {
        labels: vec![(0, 1), (1, 0)],
        regression: vec![(0, [0.5, 0.0, 0.0, 0.0])],
    };
    let w = LossWeights {
        margin: 1.0,
        margin_rank: 0.5,
        cross_entropy: 2.0,
        box_reg: 3.0,
        rpn_objectness: 1.5,
        rpn_box: 0.25,
    };
    let cfg = LossConfig {
        weights: w,
        reduction: Reduction::Sum,
        ..LossConfig::default()
    };
    let (b, _) = total_loss(
        &pred,
        &[1, 0, 0],
        &[Some([0.0; 4]), None, None],
        &[2.0, -1.0],
        &[[0.0; 4], [0.0; 4]],
        &rpn,
        &cfg,
    )
    .unwrap();
    let softplus = |x: f64| (1.0 + x.exp()).ln();
    // -ln σ(1) - ln(1-σ(0)) - ln(1-σ(-1))
    let ce = softplus(-1.0) + 2f64.ln() + softplus(-1.0);
    let box_reg = 0.5 * 0.1 * 0.1 * 9.0;
    let rpn_obj = (softplus(-2.0) + softplus(-1.0)) / 2.0;
    let rpn_box = (0.5 - 0.5 / 9.0) / 2.0;
    out.push(("total: margin", b.margin, 0.2));
    out.push(("total: margin-rank", b.margin_rank, 0.2));
    out.push(("total: cross-entropy", b.cross_entropy, ce));
    out.push(("total: box regression", b.box_reg, box_reg));
    out.push(("total: rpn objectness", b.rpn_objectness, rpn_obj));
    out.push(("total: rpn box", b.rpn_box, rpn_box));
    out.push((
        "total: weighted sum",
        b.total,
        0.2 + 0.5 * 0.2 + 2.0 * ce + 3.0 * box_reg + 1.5 * rpn_obj + 0.25 * rpn_box,
    ));
    out
}

pub fn equation_fidelity() -> Outcome {
    let cases = equation_cases();
    let mut detail = String::new();
    let mut pass = true;
    for (label, got, want) in &cases {
        if (got - want).abs() > 1e-9 {
            pass = false;
            let _ = write!(detail, "{label}: {got} != {want}; ");
        }
    }
    let defaults = [
        ("K", ModelConfig::default().k, 256.0),
        ("m+", LossConfig::default().m_plus, 0.3),
        ("m-", LossConfig::default().m_minus, 0.7),
        ("m+ const", DEFAULT_M_PLUS, 0.3),
        ("m- const", DEFAULT_M_MINUS, 0.7),
    ];
    for (label, got, want) in defaults {
        if got != want {
            pass = false;
            let _ = write!(detail, "default {label} = {got}, expected {want}; ");
        }
    }
    Outcome {
        name: "equation fidelity",
        pass,
        detail: if pass {
            format!("{} hand cases within 1e-9; K/m+/m- defaults 256/0.3/0.7", cases.len())
        } else {
            detail
        },
    }
}

// ---------------------------------------------------------------- oracles

/// Intersection over union written independently of the library: overlap
/// length per axis, then inclusion-exclusion.
pub fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| {
        let lo = if lo1 > lo2 { lo1 } else { lo2 };
        let hi = if hi1 < hi2 { hi1 } else { hi2 };
        if hi > lo {
            hi - lo
        } else {
            0.0
        }
    };
    let inter = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3]);
    if inter == 0.0 {
        return 0.0;
    }
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

/// Brute-force greedy NMS: repeatedly take the best remaining box (lowest
/// index on equal scores) and drop everything overlapping it.
pub fn oracle_nms(boxes: &[[f64; 4]], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && oracle_iou(boxes[best], boxes[i]) <= thresh);
    }
    keep
}

/// Reference AP: greedy matching in rank order, then AP as the mean over all
/// ground truths of the best precision achieved at or after the rank where
/// each was recalled (zero for never-recalled ones).
pub fn oracle_ap(dets: &[Vec<([f64; 4], f64)>], gts: &[Vec<[f64; 4]>], thresh: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut all: Vec<(f64, usize, [f64; 4])> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        for &(b, s) in ds {
            all.push((s, img, b));
        }
    }
    // stable insertion sort by descending score
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 && all[j - 1].0 < all[j].0 {
            all.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hit = Vec::new();
    for (_, img, b) in &all {
        let mut choice = None;
        let mut best = thresh;
        for (j, g) in gts[*img].iter().enumerate() {
            let v = oracle_iou(*b, *g);
            if !taken[*img][j] && v >= best && choice.map_or(true, |_| v > best) {
                best = v;
                choice = Some(j);
            }
        }
        if let Some(j) = choice {
            taken[*img][j] = true;
        }
        hit.push(choice.is_some());
    }
    let prec: Vec<f64> = (0..hit.len())
        .map(|k| hit[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut sum = 0.0;
    for k in 0..hit.len() {
        if hit[k] {
            sum += prec[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    sum / n_gt as f64
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> [f64; 4] {
    let w = rng.random_range(4.0..extent / 2.0);
    let h = rng.random_range(4.0..extent / 2.0);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    [x, y, x + w, y + h]
}

fn jittered(rng: &mut ChaCha8Rng, b: [f64; 4], amount: f64) -> [f64; 4] {
    let mut out = b.map(|v| v + rng.random_range(-amount..amount));
    if out[2] <= out[0] + 1.0 {
        out[2] = out[0] + 1.0;
    }
    if out[3] <= out[1] + 1.0 {
        out[3] = out[1] + 1.0;
    }
    out
}

fn bbox(b: [f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3]).unwrap()
}

pub fn iou_hand_cases() -> Vec<(&'static str, f64, f64)> {
    let i = |a: [f64; 4], b: [f64; 4]| iou(&bbox(a), &bbox(b));
    vec![
        ("half-shifted squares", i([0.0, 0.0, 10.0, 10.0], [5.0, 0.0, 15.0, 10.0]), 1.0 / 3.0),
        ("identical", i([2.0, 3.0, 7.0, 9.0], [2.0, 3.0, 7.0, 9.0]), 1.0),
        ("disjoint", i([0.0, 0.0, 4.0, 4.0], [10.0, 10.0, 12.0, 12.0]), 0.0),
        ("touching edges", i([0.0, 0.0, 4.0, 4.0], [4.0, 0.0, 8.0, 4.0]), 0.0),
        ("quarter contained", i([0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 5.0, 5.0]), 0.25),
        ("corner overlap", i([0.0, 0.0, 4.0, 4.0], [2.0, 2.0, 6.0, 6.0]), 4.0 / 28.0),
    ]
}

pub fn nms_trials(n: usize, seed: u64) -> (usize, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for t in 0..n {
        let count = rng.random_range(1..=25);
        let mut boxes: Vec<[f64; 4]> = Vec::new();
        while boxes.len() < count {
            // clusters of near-duplicates make suppression actually happen
            let b = random_box(&mut rng, 64.0);
            for _ in 0..rng.random_range(1..=4) {
                boxes.push(jittered(&mut rng, b, 3.0));
            }
        }
        boxes.truncate(count);
        let mut scores: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..1.0)).collect();
        if t % 10 == 0 && count > 2 {
            scores[1] = scores[0]; // exercise the tie rule
        }
        let thresh = [0.3, 0.5, 0.7][t % 3];
        let got = nms(&boxes.iter().map(|&b| bbox(b)).collect::<Vec<_>>(), &scores, thresh);
        let want = oracle_nms(&boxes, &scores, thresh);
        if got != want {
            failures.push(format!("nms trial {t}: {got:?} != {want:?}"));
        }
    }
    (n, failures)
}

pub fn ap_trials(n: usize, seed: u64) -> (usize, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for t in 0..n {
        let images = rng.random_range(1..=6);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..images {
            let g: Vec<[f64; 4]> = (0..rng.random_range(0..=4)).map(|_| random_box(&mut rng, 96.0)).collect();
            let mut d = Vec::new();
            for &b in &g {
                for _ in 0..rng.random_range(0..=2) {
                    d.push((jittered(&mut rng, b, 8.0), rng.random_range(0.0..1.0)));
                }
            }
            for _ in 0..rng.random_range(0..=3) {
                d.push((random_box(&mut rng, 96.0), rng.random_range(0.0..1.0)));
            }
            gts.push(g);
            dets.push(d);
        }
        if gts.iter().all(Vec::is_empty) {
            gts[0].push(random_box(&mut rng, 96.0));
        }
        let lib_dets: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().map(|&(b, score)| Detection { bbox: bbox(b), score }).collect())
            .collect();
        let lib_gts: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|&b| bbox(b)).collect()).collect();
        let got = compute_ap(&lib_dets, &lib_gts, 0.5).unwrap();
        let want = oracle_ap(&dets, &gts, 0.5);
        if (got - want).abs() > 1e-9 {
            failures.push(format!("ap trial {t}: {got} != {want}"));
        }
    }
    (n, failures)
}

pub fn oracle_suite() -> Outcome {
    let mut failures: Vec<String> = iou_hand_cases()
        .into_iter()
        .filter(|(_, got, want)| got != want)
        .map(|(l, got, want)| format!("iou {l}: {got} != {want}"))
        .collect();
    let (n_nms, f) = nms_trials(100, 31);
    failures.extend(f);
    let (n_ap, f) = ap_trials(100, 32);
    failures.extend(f);
    Outcome {
        name: "oracle suite",
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{n_nms} NMS instances exact, {n_ap} AP@50 instances within 1e-9, IoU hand cases exact")
        } else {
            failures.join("; ")
        },
    }
}

// ---------------------------------------------------------------- fusion laws

fn rand_bundle(rng: &mut ChaCha8Rng, n: usize) -> Vec<FeatureMap<f64>> {
    let (d, h, w) = (rng.random_range(1..=8), rng.random_range(1..=6), rng.random_range(1..=6));
    (0..n)
        .map(|_| {
            let mut m = rand_map(rng, d, h, w, 8);
            // coarse values so exact ties between queries happen too
            if rng.random_bool(0.3) {
                m.data_mut().iter_mut().for_each(|v| *v = (*v * 2.0).round());
            }
            m
        })
        .collect()
}

fn rand_cmaps(rng: &mut ChaCha8Rng, n: usize) -> Vec<CompatibilityMap<f64>> {
    let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let scale = 10f64.powi(rng.random_range(-3..=3));
    (0..n).map(|_| cmap_from(&uniform(rng, h * w).iter().map(|v| v * scale).collect::<Vec<_>>(), h, w)).collect()
}

/// One randomized trial of every fusion law; returns the violated laws.
pub fn fusion_trial(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let mut bad = Vec::new();
    let n = rng.random_range(1..=5);

    let single = rand_bundle(rng, 1);
    if feature_fusion(&QueryBundle::new(single.clone()).unwrap()) != single[0] {
        bad.push("feature fusion N=1 identity");
    }
    let one = rand_cmaps(rng, 1);
    if attention_fusion(&one).unwrap() != one[0] {
        bad.push("attention fusion N=1 identity");
    }

    let maps = rand_bundle(rng, n);
    let fused = feature_fusion(&QueryBundle::new(maps.clone()).unwrap());
    let mut shuffled = maps.clone();
    shuffled.shuffle(rng);
    if feature_fusion(&QueryBundle::new(shuffled).unwrap()) != fused {
        bad.push("feature fusion permutation invariance");
    }
    let mut doubled = maps.clone();
    doubled.extend(maps.iter().cloned());
    if feature_fusion(&QueryBundle::new(doubled).unwrap()) != fused {
        bad.push("feature fusion idempotence (repeated queries)");
    }
    let twice = feature_fusion(&QueryBundle::new(vec![fused.clone(), fused.clone()]).unwrap());
    if twice != fused {
        bad.push("feature fusion idempotence (max(x, x) = x)");
    }
    let upper = fused.data().iter().enumerate().all(|(i, &v)| maps.iter().all(|m| m.data()[i] <= v));
    let attained = fused.data().iter().enumerate().all(|(i, &v)| maps.iter().any(|m| m.data()[i] == v));
    if !(upper && attained) {
        bad.push("feature fusion is the elementwise max");
    }

    let cmaps = rand_cmaps(rng, n);
    let mean = attention_fusion(&cmaps).unwrap();
    for (i, &v) in mean.scores.iter().enumerate() {
        let lo = cmaps.iter().map(|c| c.scores[i]).fold(f64::INFINITY, f64::min);
        let hi = cmaps.iter().map(|c| c.scores[i]).fold(f64::NEG_INFINITY, f64::max);
        // a sum of n terms divided by n may land one rounding step outside
        let slack = 4.0 * f64::EPSILON * lo.abs().max(hi.abs());
        if v < lo - slack || v > hi + slack {
            bad.push("attention fusion within [min, max]");
            break;
        }
    }
    bad
}

pub fn fusion_laws(trials: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures: Vec<String> = Vec::new();
    for t in 0..trials {
        for law in fusion_trial(&mut rng) {
            failures.push(format!("trial {t}: {law}"));
        }
    }
    Outcome {
        name: "fusion laws",
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{trials} randomized trials, 0 failures")
        } else {
            format!("{} failures: {}", failures.len(), failures.iter().take(5).cloned().collect::<Vec<_>>().join("; "))
        },
    }
}
