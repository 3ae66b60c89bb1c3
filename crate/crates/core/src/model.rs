//! The full localization network: encoders, cross-modal attention, region
//! proposals and the scoring head, with a hand-written backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    apply_attention, apply_attention_backward, attention_fusion, compatibility_map, compatibility_map_backward,
    feature_fusion_backward, feature_fusion_with_winners, fuse_and_project, fuse_and_project_backward,
    CompatibilityMap, Heatmap, Projection, ProjectionCache, QueryBundle, DEFAULT_K,
};
use crate::encoders::{
    global_max_pool_with_argmax, global_mean_pool, global_mean_pool_backward, ConvEncoder, EncoderCache, Transform,
    TransformCache,
};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Init};
use crate::params::ParamRegistry;
use crate::proposals::{
    assign_rpn_targets, decode_boxes, generate_anchors, iou, label_proposals, nms, roi_pool, roi_pool_backward,
    select_proposals, AnchorGrid, BBox, BoxCoder, ProposalConfig, RpnCache, RpnHead, RpnOutput, RpnTargetConfig,
    RpnTargets,
};
use crate::real::Real;
use crate::scoring::{total_loss, HeadPredictions, LossBreakdown, LossConfig, ScoringHead};
use crate::synthdata::{mix_seed, RasterSketch, RgbImage, SceneObject};
use crate::tensor::{FeatureMap, FeatureVector};

/// Architecture hyper-parameters. Everything here is covered by the
/// checkpoint digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_channels: Vec<usize>,
    pub sketch_channels: Vec<usize>,
    /// Convolutions per encoder block (the first one has stride 2).
    pub block_depth: usize,
    pub rpn_channels: usize,
    pub theta_hidden: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub roi_size: usize,
    pub k: f64,
    pub sketch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: vec![16, 32, 64],
            sketch_channels: vec![16, 32, 64],
            block_depth: 1,
            rpn_channels: 64,
            theta_hidden: 64,
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            roi_size: 4,
            k: DEFAULT_K,
            sketch_size: 64,
        }
    }
}

impl ModelConfig {
    pub fn depth(&self) -> usize {
        self.image_channels.last().copied().unwrap_or(0)
    }

    pub fn image_stride(&self) -> usize {
        1 << self.image_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_channels.is_empty() || self.sketch_channels.is_empty() {
            return bad("encoders need at least one block");
        }
        if self.image_channels.contains(&0) || self.sketch_channels.contains(&0) {
            return bad("channel counts must be positive");
        }
        if self.image_channels.last() != self.sketch_channels.last() {
            return bad("image and sketch encoders must end at the same depth");
        }
        if self.block_depth == 0 || self.rpn_channels == 0 || self.theta_hidden == 0 || self.roi_size == 0 {
            return bad("block depth, rpn channels, scoring width and roi size must be positive");
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor scales and ratios must be non-empty");
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("anchor scales and ratios must be positive");
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad("compatibility constant must be positive");
        }
        let s = 1 << self.sketch_channels.len();
        if self.sketch_size < 8 || self.sketch_size % s != 0 {
            return Err(Error::Config(format!(
                "sketch size {} must be at least 8 and a multiple of {s}",
                self.sketch_size
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// The attention branch is bypassed: the RPN sees the image map directly.
    NoAttention,
    WithAttention,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::NoAttention),
            2 => Ok(Stage::WithAttention),
            _ => Err(Error::validation("stage", format!("expected 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::NoAttention => 1,
            Stage::WithAttention => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Elementwise max over sketch feature maps.
    #[default]
    Feature,
    /// Mean of the per-sketch compatibility maps.
    Attention,
}

impl std::str::FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(Fusion::Feature),
            "attention" => Ok(Fusion::Attention),
            _ => Err(Error::validation("fusion", format!("expected feature or attention, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AttentionBranch {
    psi_image: Transform,
    psi_sketch: Transform,
    projection: Projection,
}

#[derive(Clone, Debug, PartialEq)]
struct Arch {
    image: ConvEncoder,
    sketch: ConvEncoder,
    attention: Option<AttentionBranch>,
    rpn: RpnHead,
    theta: ScoringHead,
}

/// Regression weights of the scoring head's refinement deltas.
pub const REFINE_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

#[derive(Clone, Debug)]
pub struct Model<F> {
    config: ModelConfig,
    stage: Stage,
    params: ParamRegistry<F>,
    arch: Arch,
}

fn stream(seed: u64, part: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, part]))
}

impl<F: Real> Model<F> {
    /// Fresh parameters. Every component draws from its own random stream so
    /// that adding the attention branch leaves the other initial values alone.
    pub fn new(config: ModelConfig, stage: Stage, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.depth();
        let mut reg = ParamRegistry::new();
        let image = ConvEncoder::register(
            &mut reg,
            "image_encoder",
            3,
            &config.image_channels,
            config.block_depth,
            &mut stream(seed, 1),
        )?;
        let sketch = ConvEncoder::register(
            &mut reg,
            "sketch_encoder",
            1,
            &config.sketch_channels,
            config.block_depth,
            &mut stream(seed, 2),
        )?;
        let attention = match stage {
            Stage::NoAttention => None,
            Stage::WithAttention => {
                let mut rng = stream(seed, 3);
                Some(AttentionBranch {
                    psi_image: Transform::register(&mut reg, "attention.psi_image", d, Init::FanIn, &mut rng)?,
                    psi_sketch: Transform::register(&mut reg, "attention.psi_sketch", d, Init::FanIn, &mut rng)?,
                    projection: Projection::register(&mut reg, "attention.projection", d, &mut rng)?,
                })
            }
        };
        let per_cell = config.anchor_scales.len() * config.anchor_ratios.len();
        let rpn = RpnHead::register(&mut reg, d, config.rpn_channels, per_cell, &mut stream(seed, 4))?;
        let theta = ScoringHead::register(&mut reg, d, config.theta_hidden, Init::FanIn, &mut stream(seed, 5))?;
        Ok(Self {
            config,
            stage,
            params: reg,
            arch: Arch {
                image,
                sketch,
                attention,
                rpn,
                theta,
            },
        })
    }

    /// Builds a model for `stage` whose parameters are copied by name from
    /// `source`; entries missing from `source` keep their fresh values.
    /// Returns the model and the names that were freshly initialised.
    pub fn from_registry(
        config: ModelConfig,
        stage: Stage,
        seed: u64,
        source: &ParamRegistry<F>,
    ) -> Result<(Self, Vec<String>)> {
        let mut model = Self::new(config, stage, seed)?;
        let mut fresh = Vec::new();
        for p in model.params.entries_mut() {
            match source.by_name(&p.name) {
                Some(src) if src.shape == p.shape => p.data.copy_from_slice(&src.data),
                Some(src) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        p.name, src.shape, p.shape
                    )))
                }
                None => fresh.push(p.name.clone()),
            }
        }
        if let Some(extra) = source.names().find(|n| model.params.id_of(n).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra} for stage {:?}", stage)));
        }
        Ok((model, fresh))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn params(&self) -> &ParamRegistry<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry<F> {
        &mut self.params
    }

    pub fn digest(&self) -> String {
        self.config.digest()
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            stage: self.stage,
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }

    pub fn anchors(&self, map_height: usize, map_width: usize) -> Result<AnchorGrid> {
        generate_anchors(
            map_width,
            map_height,
            self.config.image_stride(),
            &self.config.anchor_scales,
            &self.config.anchor_ratios,
        )
    }

    fn check_sketches(&self, sketches: &[RasterSketch]) -> Result<()> {
        if sketches.is_empty() {
            return Err(Error::validation("sketches", "at least one sketch is required"));
        }
        if let Some(s) = sketches.iter().find(|s| s.size() != self.config.sketch_size) {
            return Err(Error::validation(
                "sketches",
                format!("raster size {} does not match the model's {}", s.size(), self.config.sketch_size),
            ));
        }
        Ok(())
    }

    /// Encoders, query fusion, attention and the RPN.
    pub fn forward_trunk(&self, image: &RgbImage, sketches: &[RasterSketch], fusion: Fusion) -> Result<Trunk<F>> {
        self.check_sketches(sketches)?;
        let reg = &self.params;
        let image_input: FeatureMap<F> = image.to_feature_map();
        let (img_phi, img_cache) = self.arch.image.forward(reg, &image_input)?;
        let mut sk_phis = Vec::with_capacity(sketches.len());
        let mut sk_caches = Vec::with_capacity(sketches.len());
        for s in sketches {
            let (m, c) = self.arch.sketch.forward(reg, &s.to_feature_map())?;
            sk_phis.push(m);
            sk_caches.push(c);
        }
        let bundle = QueryBundle::new(sk_phis)?;
        let n = bundle.len();

        // maps the compatibility branch sees, and the vector the scorer sees
        let (fused, sketch_vec) = match fusion {
            Fusion::Feature => {
                let (fm, winners) = feature_fusion_with_winners(&bundle);
                let v = global_mean_pool(&fm);
                (Some((fm, winners)), v)
            }
            Fusion::Attention => {
                let mut acc = vec![F::zero(); self.config.depth()];
                for m in bundle.maps() {
                    for (a, v) in acc.iter_mut().zip(global_mean_pool(m).0) {
                        *a += v;
                    }
                }
                let nf = F::c(n as f64);
                (None, FeatureVector(acc.into_iter().map(|v| v / nf).collect()))
            }
        };

        let attention = match &self.arch.attention {
            None => None,
            Some(branch) => {
                let (img_psi, img_psi_cache) = branch.psi_image.forward(reg, &img_phi)?;
                let queries: Vec<&FeatureMap<F>> = match &fused {
                    Some((fm, _)) => vec![fm],
                    None => bundle.maps().iter().collect(),
                };
                let mut per_query = Vec::with_capacity(queries.len());
                let mut cmaps = Vec::with_capacity(queries.len());
                for q in queries {
                    let (psi, cache) = branch.psi_sketch.forward(reg, q)?;
                    let (global, argmax) = global_max_pool_with_argmax(&psi);
                    cmaps.push(compatibility_map(&img_psi, &global, self.config.k)?);
                    per_query.push(QueryAttention {
                        psi_like: psi.zeros_like(),
                        cache,
                        global,
                        argmax,
                    });
                }
                let lambda = if cmaps.len() == 1 {
                    cmaps.pop().expect("one map")
                } else {
                    attention_fusion(&cmaps)?
                };
                let attended = apply_attention(&img_phi, &lambda)?;
                let (final_map, proj_cache) = fuse_and_project(reg, &branch.projection, &attended, &img_phi)?;
                Some(AttentionState {
                    img_psi,
                    img_psi_cache,
                    per_query,
                    lambda,
                    proj_cache,
                    final_map,
                })
            }
        };
        let final_map = attention.as_ref().map(|a| &a.final_map).unwrap_or(&img_phi);
        let (rpn, rpn_cache) = self.arch.rpn.forward(reg, final_map);
        Ok(Trunk {
            image_size: (image.width(), image.height()),
            img_phi,
            img_cache,
            bundle,
            sk_caches,
            fusion,
            fused,
            sketch_vec,
            attention,
            rpn,
            rpn_cache,
        })
    }

    /// Proposals, labels and regression targets for one training sample.
    pub fn plan_sample<R: Rng>(
        &self,
        trunk: &Trunk<F>,
        objects: &[SceneObject],
        query: &str,
        opts: &SampleOptions,
        rng: &mut R,
    ) -> Result<SamplePlan> {
        let fm = trunk.final_map();
        let grid = self.anchors(fm.height(), fm.width())?;
        let rpn_coder = BoxCoder::default();
        let decoded = decode_boxes(&grid.anchors, &trunk.rpn.deltas_f64(), trunk.image_size, &rpn_coder)?;
        let mut boxes: Vec<BBox> = select_proposals(&decoded, &trunk.rpn.objectness(), &opts.proposals)
            .into_iter()
            .map(|p| p.bbox)
            .collect();
        if opts.add_gt_proposals {
            boxes.extend(objects.iter().map(|o| o.bbox));
        }
        let labels = label_proposals(&boxes, objects, query);
        let coder = BoxCoder::with_weights(REFINE_WEIGHTS);
        let box_targets = boxes
            .iter()
            .zip(&labels)
            .map(|(b, &y)| {
                (y == 1).then(|| {
                    let gt = objects
                        .iter()
                        .filter(|o| o.category == query)
                        .max_by(|a, c| iou(b, &a.bbox).total_cmp(&iou(b, &c.bbox)))
                        .expect("a positive proposal has a query-class box");
                    coder.encode(b, &gt.bbox)
                })
            })
            .collect();
        let gts: Vec<BBox> = objects
            .iter()
            .filter(|o| !opts.rpn_class_filter || o.category == query)
            .map(|o| o.bbox)
            .collect();
        let rpn_targets = assign_rpn_targets(&grid, &gts, &rpn_coder, &opts.rpn_targets, rng);
        Ok(SamplePlan {
            proposals: boxes,
            labels,
            box_targets,
            rpn_targets,
        })
    }

    /// Loss for a fixed plan; when `grads` is given the parameter gradients
    /// of the total are accumulated into it.
    pub fn loss_from_trunk(
        &self,
        trunk: &Trunk<F>,
        plan: &SamplePlan,
        loss: &LossConfig,
        grads: Option<&mut ParamRegistry<F>>,
    ) -> Result<LossBreakdown> {
        let reg = &self.params;
        let fm = trunk.final_map();
        let (rois, roi_caches) = roi_pool(fm, &plan.proposals, self.config.roi_size)?;
        let roi_vecs: Vec<_> = rois.iter().map(global_mean_pool).collect();
        let (out, head_cache) = self.arch.theta.forward(reg, &roi_vecs, &trunk.sketch_vec)?;
        let pred = HeadPredictions::from_output(&out);
        let (breakdown, g) = total_loss(
            &pred,
            &plan.labels,
            &plan.box_targets,
            &trunk.rpn.logits.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            &trunk.rpn.deltas_f64(),
            &plan.rpn_targets,
            loss,
        )?;
        if !breakdown.is_finite() {
            return Err(Error::NonFinite(format!("loss {breakdown:?}")));
        }
        let Some(grads) = grads else {
            return Ok(breakdown);
        };
        let cast = |v: &[f64]| v.iter().map(|&x| F::c(x)).collect::<Vec<F>>();
        let ddeltas: Vec<[F; 4]> = g.ddeltas.iter().map(|d| d.map(F::c)).collect();
        let (droi, dsketch_vec) = self.arch.theta.backward(
            reg,
            &head_cache,
            &out,
            &cast(&g.da),
            &cast(&g.dclass),
            &ddeltas,
            grads,
        );
        let droi_maps: Vec<_> = rois
            .iter()
            .zip(&droi)
            .map(|(r, d)| global_mean_pool_backward(r, d))
            .collect();
        let mut dfinal = roi_pool_backward(fm, &roi_caches, &droi_maps);

        let n_anchors = trunk.rpn.logits.len();
        let mut dlogits = vec![F::zero(); n_anchors];
        let mut drpn = vec![[F::zero(); 4]; n_anchors];
        for &(i, v) in &g.drpn_logits {
            dlogits[i] += F::c(v);
        }
        for &(i, v) in &g.drpn_deltas {
            for k in 0..4 {
                drpn[i][k] += F::c(v[k]);
            }
        }
        let d_rpn_in = self.arch.rpn.backward(reg, &trunk.rpn_cache, &dlogits, &drpn, grads);
        dfinal.add_assign(&d_rpn_in);
        self.backward_trunk(trunk, &dfinal, &dsketch_vec, grads);
        Ok(breakdown)
    }

    fn backward_trunk(&self, trunk: &Trunk<F>, dfinal: &FeatureMap<F>, dsketch_vec: &[F], grads: &mut ParamRegistry<F>) {
        let reg = &self.params;
        let n = trunk.bundle.len();
        let mut dsk: Vec<FeatureMap<F>> = trunk.bundle.maps().iter().map(|m| m.zeros_like()).collect();
        let mut dfused = trunk.fused.as_ref().map(|(fm, _)| fm.zeros_like());

        let dimg_phi = match (&self.arch.attention, &trunk.attention) {
            (Some(branch), Some(st)) => {
                let (datt, mut dimg) = fuse_and_project_backward(reg, &branch.projection, &st.proj_cache, dfinal, grads);
                let (dimg_att, dlambda) = apply_attention_backward(&trunk.img_phi, &st.lambda, &datt);
                dimg.add_assign(&dimg_att);
                let per_query_dlambda = if st.per_query.len() == 1 {
                    dlambda
                } else {
                    crate::attention::attention_fusion_backward(st.per_query.len(), &dlambda)
                };
                let mut dpsi_img = st.img_psi.zeros_like();
                for (q, pq) in st.per_query.iter().enumerate() {
                    let (dpi, dglobal) = compatibility_map_backward(&st.img_psi, &pq.global, self.config.k, &per_query_dlambda);
                    dpsi_img.add_assign(&dpi);
                    let mut dpsi = pq.psi_like.clone();
                    for (&idx, &g) in pq.argmax.iter().zip(&dglobal) {
                        dpsi.data_mut()[idx] += g;
                    }
                    let dq = branch.psi_sketch.backward(reg, &pq.cache, &dpsi, grads);
                    match dfused.as_mut() {
                        Some(df) => df.add_assign(&dq),
                        None => dsk[q].add_assign(&dq),
                    }
                }
                let d = branch.psi_image.backward(reg, &st.img_psi_cache, &dpsi_img, grads);
                dimg.add_assign(&d);
                dimg
            }
            _ => dfinal.clone(),
        };

        match (dfused.as_mut(), &trunk.fused) {
            (Some(df), Some((fm, winners))) => {
                df.add_assign(&global_mean_pool_backward(fm, dsketch_vec));
                for (acc, g) in dsk.iter_mut().zip(feature_fusion_backward(&trunk.bundle, winners, df)) {
                    acc.add_assign(&g);
                }
            }
            _ => {
                let nf = F::c(n as f64);
                let scaled: Vec<F> = dsketch_vec.iter().map(|&g| g / nf).collect();
                for (acc, m) in dsk.iter_mut().zip(trunk.bundle.maps()) {
                    acc.add_assign(&global_mean_pool_backward(m, &scaled));
                }
            }
        }

        self.arch.image.backward(reg, &trunk.img_cache, &dimg_phi, grads);
        for (cache, d) in trunk.sk_caches.iter().zip(&dsk) {
            self.arch.sketch.backward(reg, cache, d, grads);
        }
    }

    /// One training sample: forward, plan, loss and gradient accumulation.
    #[allow(clippy::too_many_arguments)]
    pub fn train_sample<R: Rng>(
        &self,
        image: &RgbImage,
        sketches: &[RasterSketch],
        objects: &[SceneObject],
        query: &str,
        opts: &SampleOptions,
        rng: &mut R,
        grads: &mut ParamRegistry<F>,
    ) -> Result<LossBreakdown> {
        let trunk = self.forward_trunk(image, sketches, opts.fusion)?;
        let plan = self.plan_sample(&trunk, objects, query, opts, rng)?;
        self.loss_from_trunk(&trunk, &plan, &opts.loss, Some(grads))
    }

    /// Inference: scored, refined, suppressed detections plus the attention
    /// map when the model has one.
    pub fn localize(
        &self,
        image: &RgbImage,
        sketches: &[RasterSketch],
        fusion: Fusion,
        opts: &InferenceOptions,
    ) -> Result<Localization> {
        let trunk = self.forward_trunk(image, sketches, fusion)?;
        let fm = trunk.final_map();
        let grid = self.anchors(fm.height(), fm.width())?;
        let decoded = decode_boxes(&grid.anchors, &trunk.rpn.deltas_f64(), trunk.image_size, &BoxCoder::default())?;
        let proposals = select_proposals(&decoded, &trunk.rpn.objectness(), &opts.proposals);
        let heatmap = trunk
            .attention
            .as_ref()
            .map(|a| Heatmap::upsample(&a.lambda, self.config.image_stride()));
        if proposals.is_empty() {
            return Ok(Localization {
                detections: Vec::new(),
                heatmap,
            });
        }
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let (rois, _) = roi_pool(fm, &boxes, self.config.roi_size)?;
        let roi_vecs: Vec<_> = rois.iter().map(global_mean_pool).collect();
        let (out, _) = self.arch.theta.forward(&self.params, &roi_vecs, &trunk.sketch_vec)?;
        let coder = BoxCoder::with_weights(REFINE_WEIGHTS);
        let (w, h) = (trunk.image_size.0 as f64, trunk.image_size.1 as f64);
        let mut cands = Vec::with_capacity(boxes.len());
        let mut scores = Vec::with_capacity(boxes.len());
        for (k, p) in proposals.iter().enumerate() {
            let delta = out.deltas[k].map(|v| v.as_f64());
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("refinement delta of proposal {k}")));
            }
            let [x1, y1, x2, y2] = coder.decode(&p.bbox, &delta);
            let refined = if opts.refine {
                BBox { x1, y1, x2, y2 }.clip(w, h, 1.0).unwrap_or(p.bbox)
            } else {
                p.bbox
            };
            let a = out.a[k].as_f64();
            cands.push(refined);
            scores.push(match opts.score {
                ScoreMode::Foreground => a,
                ScoreMode::ForegroundTimesObjectness => a * p.objectness,
                ScoreMode::ClassProbability => sigmoid(out.class_logits[k].as_f64()),
            });
        }
        let detections = nms(&cands, &scores, opts.final_nms)
            .into_iter()
            .take(opts.max_detections)
            .map(|i| Detection {
                bbox: cands[i],
                score: scores[i],
            })
            .collect();
        Ok(Localization { detections, heatmap })
    }
}

#[derive(Clone, Debug)]
struct QueryAttention<F> {
    psi_like: FeatureMap<F>,
    cache: TransformCache<F>,
    global: FeatureVector<F>,
    argmax: Vec<usize>,
}

#[derive(Clone, Debug)]
struct AttentionState<F> {
    img_psi: FeatureMap<F>,
    img_psi_cache: TransformCache<F>,
    per_query: Vec<QueryAttention<F>>,
    lambda: CompatibilityMap<F>,
    proj_cache: ProjectionCache<F>,
    final_map: FeatureMap<F>,
}

/// Everything the forward pass up to the RPN produced, kept for backward.
#[derive(Clone, Debug)]
pub struct Trunk<F> {
    /// `(width, height)` of the input image.
    pub image_size: (usize, usize),
    img_phi: FeatureMap<F>,
    img_cache: EncoderCache<F>,
    bundle: QueryBundle<F>,
    sk_caches: Vec<EncoderCache<F>>,
    pub fusion: Fusion,
    fused: Option<(FeatureMap<F>, Vec<usize>)>,
    sketch_vec: FeatureVector<F>,
    attention: Option<AttentionState<F>>,
    pub rpn: RpnOutput<F>,
    rpn_cache: RpnCache<F>,
}

impl<F: Real> Trunk<F> {
    /// The map the RPN and ROI pooling run on.
    pub fn final_map(&self) -> &FeatureMap<F> {
        self.attention.as_ref().map(|a| &a.final_map).unwrap_or(&self.img_phi)
    }

    pub fn image_map(&self) -> &FeatureMap<F> {
        &self.img_phi
    }

    pub fn sketch_vector(&self) -> &FeatureVector<F> {
        &self.sketch_vec
    }

    pub fn compatibility(&self) -> Option<&CompatibilityMap<F>> {
        self.attention.as_ref().map(|a| &a.lambda)
    }
}

/// Proposal boxes with their training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub proposals: Vec<BBox>,
    pub labels: Vec<u8>,
    pub box_targets: Vec<Option<[f64; 4]>>,
    pub rpn_targets: RpnTargets,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub proposals: ProposalConfig,
    pub rpn_targets: RpnTargetConfig,
    pub loss: LossConfig,
    /// Append the ground-truth boxes to the sampled proposals.
    pub add_gt_proposals: bool,
    /// Only boxes of the queried category count as RPN positives.
    pub rpn_class_filter: bool,
    pub fusion: Fusion,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            proposals: ProposalConfig::train(),
            rpn_targets: RpnTargetConfig::default(),
            loss: LossConfig::default(),
            add_gt_proposals: true,
            rpn_class_filter: false,
            fusion: Fusion::Feature,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Foreground,
    ForegroundTimesObjectness,
    /// Sigmoid of the class-head logit instead of `a_k`.
    ClassProbability,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOptions {
    pub proposals: ProposalConfig,
    pub final_nms: f64,
    pub max_detections: usize,
    pub score: ScoreMode,
    /// Apply the scorer's box-refinement deltas; off scores the raw proposals.
    pub refine: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            proposals: ProposalConfig::eval(),
            final_nms: 0.5,
            max_detections: 100,
            score: ScoreMode::Foreground,
            refine: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BBox,
    pub score: f64,
}

mod box_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::proposals::BBox;

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        b.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        BBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    /// Sorted by score, descending.
    pub detections: Vec<Detection>,
    pub heatmap: Option<Heatmap>,
}
