//! Proposal scoring head Θ and the training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{global_mean_pool, global_mean_pool_backward};
use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_in_place, sigmoid, Init, LinearLayer};
use crate::params::ParamRegistry;
use crate::proposals::{Proposal, RpnTargets};
use crate::real::Real;
use crate::tensor::{FeatureMap, FeatureVector};

pub const DEFAULT_M_PLUS: f64 = 0.3;
pub const DEFAULT_M_MINUS: f64 = 0.7;

/// Two-layer trunk over `[g_m(roi); g_m(sketch)]` with three sibling outputs:
/// the foreground score, a class logit and four box refinement deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringHead {
    pub depth: usize,
    pub hidden: usize,
    pub fc1: LinearLayer,
    pub score: LinearLayer,
    pub class: LinearLayer,
    pub refine: LinearLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<F> {
    /// Foreground probability per proposal.
    pub a: Vec<F>,
    pub class_logits: Vec<F>,
    pub deltas: Vec<[F; 4]>,
}

#[derive(Clone, Debug)]
pub struct HeadCache<F> {
    n: usize,
    input: Vec<F>,
    hidden: Vec<F>,
}

impl ScoringHead {
    pub fn register<F: Real, R: Rng>(
        reg: &mut ParamRegistry<F>,
        depth: usize,
        hidden: usize,
        init: Init<F>,
        rng: &mut R,
    ) -> Result<Self> {
        let fc1 = LinearLayer::register(reg, "theta.fc1", 2 * depth, hidden, init.clone(), rng)?;
        let head_init = |i: &Init<F>| match i {
            Init::Weights(_) => Init::Zero,
            other => other.clone(),
        };
        let score = LinearLayer::register(reg, "theta.score", hidden, 1, head_init(&init), rng)?;
        let class = LinearLayer::register(reg, "theta.class", hidden, 1, head_init(&init), rng)?;
        let refine = LinearLayer::register(reg, "theta.refine", hidden, 4, head_init(&init), rng)?;
        Ok(Self {
            depth,
            hidden,
            fc1,
            score,
            class,
            refine,
        })
    }

    pub fn forward<F: Real>(
        &self,
        reg: &ParamRegistry<F>,
        rois: &[FeatureVector<F>],
        sketch: &FeatureVector<F>,
    ) -> Result<(HeadOutput<F>, HeadCache<F>)> {
        if sketch.len() != self.depth {
            return Err(Error::Shape(format!(
                "scoring head expects depth {}, sketch vector has {}",
                self.depth,
                sketch.len()
            )));
        }
        if let Some(bad) = rois.iter().find(|r| r.len() != self.depth) {
            return Err(Error::Shape(format!(
                "scoring head expects depth {}, roi vector has {}",
                self.depth,
                bad.len()
            )));
        }
        let n = rois.len();
        let mut input = Vec::with_capacity(n * 2 * self.depth);
        for r in rois {
            input.extend_from_slice(&r.0);
            input.extend_from_slice(&sketch.0);
        }
        let mut hidden = self.fc1.forward(reg, &input, n);
        relu_in_place(&mut hidden);
        let a = self.score.forward(reg, &hidden, n).into_iter().map(sigmoid).collect();
        let class_logits = self.class.forward(reg, &hidden, n);
        let deltas = self
            .refine
            .forward(reg, &hidden, n)
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        Ok((
            HeadOutput { a, class_logits, deltas },
            HeadCache { n, input, hidden },
        ))
    }

    /// `da` is the gradient w.r.t. the probabilities `a` (the sigmoid is
    /// differentiated here). Returns gradients w.r.t. each roi vector and the
    /// sketch vector.
    pub fn backward<F: Real>(
        &self,
        reg: &ParamRegistry<F>,
        cache: &HeadCache<F>,
        out: &HeadOutput<F>,
        da: &[F],
        dclass: &[F],
        ddeltas: &[[F; 4]],
        grads: &mut ParamRegistry<F>,
    ) -> (Vec<Vec<F>>, Vec<F>) {
        let n = cache.n;
        let dz: Vec<F> = da.iter().zip(&out.a).map(|(&g, &a)| g * a * (F::one() - a)).collect();
        let dflat: Vec<F> = ddeltas.iter().flatten().copied().collect();
        let mut dh = self.score.backward(reg, &cache.hidden, n, &dz, grads);
        for (acc, v) in dh.iter_mut().zip(self.class.backward(reg, &cache.hidden, n, dclass, grads)) {
            *acc += v;
        }
        for (acc, v) in dh.iter_mut().zip(self.refine.backward(reg, &cache.hidden, n, &dflat, grads)) {
            *acc += v;
        }
        relu_backward(&cache.hidden, &mut dh);
        let dx = self.fc1.backward(reg, &cache.input, n, &dh, grads);
        let d = self.depth;
        let mut droi = Vec::with_capacity(n);
        let mut dsketch = vec![F::zero(); d];
        for row in dx.chunks_exact(2 * d) {
            droi.push(row[..d].to_vec());
            for (acc, &v) in dsketch.iter_mut().zip(&row[d..]) {
                *acc += v;
            }
        }
        (droi, dsketch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredProposal {
    pub proposal: Proposal,
    pub a: f64,
    pub refined_deltas: [f64; 4],
    pub class_logit: f64,
}

/// Scores pooled proposal features against a sketch map.
pub fn score_proposals<F: Real>(
    head: &ScoringHead,
    reg: &ParamRegistry<F>,
    proposals: &[Proposal],
    rois: &[FeatureMap<F>],
    sketch_map: &FeatureMap<F>,
) -> Result<Vec<ScoredProposal>> {
    if proposals.len() != rois.len() {
        return Err(Error::Shape(format!("{} proposals but {} pooled features", proposals.len(), rois.len())));
    }
    let vecs: Vec<_> = rois.iter().map(global_mean_pool).collect();
    let (out, _) = head.forward(reg, &vecs, &global_mean_pool(sketch_map))?;
    Ok(proposals
        .iter()
        .enumerate()
        .map(|(i, p)| ScoredProposal {
            proposal: p.clone(),
            a: out.a[i].as_f64(),
            refined_deltas: out.deltas[i].map(|v| v.as_f64()),
            class_logit: out.class_logits[i].as_f64(),
        })
        .collect())
}

/// Gradient of a mean-pooled vector back onto its map.
pub fn pooled_backward<F: Real>(like: &FeatureMap<F>, grad: &[F]) -> FeatureMap<F> {
    global_mean_pool_backward(like, grad)
}

fn check_labels(a: &[f64], y: &[u8]) -> Result<()> {
    if a.len() != y.len() {
        return Err(Error::Shape(format!("{} scores but {} labels", a.len(), y.len())));
    }
    match y.iter().find(|&&l| l > 1) {
        Some(&l) => Err(Error::InvalidLabel(l)),
        None => Ok(()),
    }
}

/// Foreground/background hinge terms with their subgradient.
pub fn margin_loss_grad(a: &[f64], y: &[u8], m_plus: f64, m_minus: f64) -> Result<(f64, Vec<f64>)> {
    check_labels(a, y)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; a.len()];
    for (k, (&ak, &yk)) in a.iter().zip(y).enumerate() {
        if yk == 1 {
            if m_plus - ak > 0.0 {
                loss += m_plus - ak;
                grad[k] = -1.0;
            }
        } else if ak - m_minus > 0.0 {
            loss += ak - m_minus;
            grad[k] = 1.0;
        }
    }
    Ok((loss, grad))
}

pub fn margin_loss(a: &[f64], y: &[u8], m_plus: f64, m_minus: f64) -> Result<f64> {
    margin_loss_grad(a, y, m_plus, m_minus).map(|(l, _)| l)
}

/// Pairwise term over all pairs `k < l`: same-label pairs are pulled within
/// `m_minus`, different-label pairs pushed at least `m_plus` apart. When a
/// different-label pair is tied the subgradient pushes the foreground member
/// up.
pub fn margin_rank_loss_grad(a: &[f64], y: &[u8], m_plus: f64, m_minus: f64) -> Result<(f64, Vec<f64>)> {
    check_labels(a, y)?;
    let n = a.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for k in 0..n {
        for l in k + 1..n {
            let diff = a[k] - a[l];
            let gap = diff.abs();
            // sign of d|a_k - a_l| / d a_k
            let sign = if y[k] == y[l] {
                diff.signum()
            } else if diff != 0.0 {
                diff.signum()
            } else if y[k] == 1 {
                1.0
            } else {
                -1.0
            };
            if y[k] == y[l] {
                if gap - m_minus > 0.0 {
                    loss += gap - m_minus;
                    grad[k] += sign;
                    grad[l] -= sign;
                }
            } else if m_plus - gap > 0.0 {
                loss += m_plus - gap;
                grad[k] -= sign;
                grad[l] += sign;
            }
        }
    }
    Ok((loss, grad))
}

pub fn margin_rank_loss(a: &[f64], y: &[u8], m_plus: f64, m_minus: f64) -> Result<f64> {
    margin_rank_loss_grad(a, y, m_plus, m_minus).map(|(l, _)| l)
}

/// Binary cross-entropy on a logit; returns `(loss, dloss/dz)`.
pub fn bce_with_logits(z: f64, y: u8) -> (f64, f64) {
    let t = f64::from(y);
    let loss = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - t)
}

/// Smooth-L1 with transition `beta`; returns `(loss, dloss/dx)`.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub margin: f64,
    pub margin_rank: f64,
    pub cross_entropy: f64,
    pub box_reg: f64,
    pub rpn_objectness: f64,
    pub rpn_box: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            margin: 1.0,
            margin_rank: 1.0,
            cross_entropy: 1.0,
            box_reg: 1.0,
            rpn_objectness: 1.0,
            rpn_box: 1.0,
        }
    }
}

/// How the per-proposal terms are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Plain sums over proposals (and pairs).
    #[default]
    Sum,
    /// Sums divided by the proposal count.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub m_plus: f64,
    pub m_minus: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            reduction: Reduction::Sum,
            m_plus: DEFAULT_M_PLUS,
            m_minus: DEFAULT_M_MINUS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub margin: f64,
    pub margin_rank: f64,
    pub cross_entropy: f64,
    pub box_reg: f64,
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.margin * self.margin
            + w.margin_rank * self.margin_rank
            + w.cross_entropy * self.cross_entropy
            + w.box_reg * self.box_reg
            + w.rpn_objectness * self.rpn_objectness
            + w.rpn_box * self.rpn_box
    }

    pub fn is_finite(&self) -> bool {
        [
            self.margin,
            self.margin_rank,
            self.cross_entropy,
            self.box_reg,
            self.rpn_objectness,
            self.rpn_box,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Per-proposal head inputs to [`total_loss`], all in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadPredictions {
    pub a: Vec<f64>,
    pub class_logits: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

impl HeadPredictions {
    pub fn from_output<F: Real>(out: &HeadOutput<F>) -> Self {
        Self {
            a: out.a.iter().map(|v| v.as_f64()).collect(),
            class_logits: out.class_logits.iter().map(|v| v.as_f64()).collect(),
            deltas: out.deltas.iter().map(|d| d.map(|v| v.as_f64())).collect(),
        }
    }
}

/// Gradients of the weighted total w.r.t. every prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub da: Vec<f64>,
    pub dclass: Vec<f64>,
    pub ddeltas: Vec<[f64; 4]>,
    /// Sparse: `(anchor, dlogit)`.
    pub drpn_logits: Vec<(usize, f64)>,
    /// Sparse: `(anchor, ddeltas)`.
    pub drpn_deltas: Vec<(usize, [f64; 4])>,
}

/// All loss terms and their gradients.
///
/// `box_targets[k]` is the encoded regression target of proposal `k`, present
/// only for foreground proposals. RPN terms are averaged over the sampled
/// anchors regardless of `cfg.reduction`.
pub fn total_loss(
    pred: &HeadPredictions,
    labels: &[u8],
    box_targets: &[Option<[f64; 4]>],
    rpn_logits: &[f64],
    rpn_deltas: &[[f64; 4]],
    rpn_targets: &RpnTargets,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGrads)> {
    let n = pred.a.len();
    if pred.class_logits.len() != n || pred.deltas.len() != n || box_targets.len() != n {
        return Err(Error::Shape("inconsistent per-proposal prediction counts".into()));
    }
    let w = &cfg.weights;
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n.max(1) as f64,
    };
    let (margin, gm) = margin_loss_grad(&pred.a, labels, cfg.m_plus, cfg.m_minus)?;
    let (margin_rank, gr) = margin_rank_loss_grad(&pred.a, labels, cfg.m_plus, cfg.m_minus)?;
    let da = gm
        .iter()
        .zip(&gr)
        .map(|(m, r)| scale * (w.margin * m + w.margin_rank * r))
        .collect();

    let mut ce = 0.0;
    let mut dclass = Vec::with_capacity(n);
    for (&z, &y) in pred.class_logits.iter().zip(labels) {
        let (l, g) = bce_with_logits(z, y);
        ce += l;
        dclass.push(scale * w.cross_entropy * g);
    }

    let mut box_reg = 0.0;
    let mut ddeltas = vec![[0.0; 4]; n];
    for (k, t) in box_targets.iter().enumerate() {
        if let Some(t) = t {
            for j in 0..4 {
                let (l, g) = smooth_l1(pred.deltas[k][j] - t[j], SMOOTH_L1_BETA);
                box_reg += l;
                ddeltas[k][j] = scale * w.box_reg * g;
            }
        }
    }

    let sampled = rpn_targets.labels.len().max(1) as f64;
    let mut rpn_obj = 0.0;
    let mut drpn_logits = Vec::with_capacity(rpn_targets.labels.len());
    for &(i, y) in &rpn_targets.labels {
        let z = *rpn_logits
            .get(i)
            .ok_or_else(|| Error::Shape(format!("rpn target anchor {i} out of range")))?;
        let (l, g) = bce_with_logits(z, y);
        rpn_obj += l;
        drpn_logits.push((i, w.rpn_objectness * g / sampled));
    }
    let mut rpn_box = 0.0;
    let mut drpn_deltas = Vec::with_capacity(rpn_targets.regression.len());
    for &(i, t) in &rpn_targets.regression {
        let d = rpn_deltas
            .get(i)
            .ok_or_else(|| Error::Shape(format!("rpn target anchor {i} out of range")))?;
        let mut g4 = [0.0; 4];
        for j in 0..4 {
            let (l, g) = smooth_l1(d[j] - t[j], SMOOTH_L1_BETA);
            rpn_box += l;
            g4[j] = w.rpn_box * g / sampled;
        }
        drpn_deltas.push((i, g4));
    }

    let mut b = LossBreakdown {
        margin: margin * scale,
        margin_rank: margin_rank * scale,
        cross_entropy: ce * scale,
        box_reg: box_reg * scale,
        rpn_objectness: rpn_obj / sampled,
        rpn_box: rpn_box / sampled,
        total: 0.0,
    };
    b.total = b.weighted_total(w);
    Ok((
        b,
        LossGrads {
            da,
            dclass,
            ddeltas,
            drpn_logits,
            drpn_deltas,
        },
    ))
}
