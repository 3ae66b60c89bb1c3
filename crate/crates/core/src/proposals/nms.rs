use std::cmp::Ordering;

use super::boxes::{iou, BBox, Decoded};

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    /// Index of the anchor the box was decoded from, if any.
    pub anchor: Option<usize>,
    pub label: Option<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_top_k: usize,
    pub nms_thresh: f64,
    pub post_nms_count: usize,
}

impl ProposalConfig {
    pub fn train() -> Self {
        Self {
            pre_nms_top_k: 600,
            nms_thresh: 0.7,
            post_nms_count: 64,
        }
    }

    pub fn eval() -> Self {
        Self {
            post_nms_count: 100,
            ..Self::train()
        }
    }
}

/// Indices sorted by descending score; equal scores keep index order.
pub(crate) fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices by descending score.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let order = rank_by_score(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Top-k by objectness, NMS, then truncation.
pub fn select_proposals(decoded: &Decoded, objectness: &[f64], cfg: &ProposalConfig) -> Vec<Proposal> {
    let scores: Vec<f64> = decoded.source.iter().map(|&i| objectness[i]).collect();
    let top: Vec<usize> = rank_by_score(&scores).into_iter().take(cfg.pre_nms_top_k).collect();
    let boxes: Vec<BBox> = top.iter().map(|&i| decoded.boxes[i]).collect();
    let top_scores: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
    nms(&boxes, &top_scores, cfg.nms_thresh)
        .into_iter()
        .take(cfg.post_nms_count)
        .map(|k| Proposal {
            bbox: boxes[k],
            objectness: top_scores[k],
            anchor: Some(decoded.source[top[k]]),
            label: None,
        })
        .collect()
}
