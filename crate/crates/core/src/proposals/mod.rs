//! Query-conditioned region proposals: anchors, the RPN head, delta
//! decoding, NMS, ROI pooling and foreground labelling.

mod anchors;
mod boxes;
mod nms;
mod roi;
mod rpn;

pub use anchors::{generate_anchors, AnchorGrid};
pub use boxes::{decode_boxes, iou, BBox, BoxCoder, Decoded};
pub use nms::{nms, select_proposals, Proposal, ProposalConfig};
pub use roi::{roi_pool, roi_pool_backward, RoiCache};
pub use rpn::{assign_rpn_targets, RpnCache, RpnHead, RpnOutput, RpnTargetConfig, RpnTargets};

use crate::synthdata::SceneObject;

/// `1` iff the proposal overlaps a ground-truth box of the query category
/// with IoU >= 0.5. Boxes of other categories never make a positive.
pub fn label_proposals(boxes: &[BBox], objects: &[SceneObject], query_category: &str) -> Vec<u8> {
    let gts: Vec<&BBox> = objects
        .iter()
        .filter(|o| o.category == query_category)
        .map(|o| &o.bbox)
        .collect();
    boxes
        .iter()
        .map(|b| u8::from(gts.iter().any(|g| iou(b, g) >= 0.5)))
        .collect()
}
