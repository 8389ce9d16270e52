//! Anchors, proposals, ROI pooling, heads and the training loss.

pub mod anchors;
pub mod boxes;
pub mod heads;
pub mod loss;
pub mod roi_align;
pub mod rpn;

pub use anchors::{assign_rpn_targets, generate_anchors, sample_anchors, AnchorLabel, RpnTargets};
pub use boxes::{iou, nms, nms_indices, Box, BoxDelta, Proposal};
pub use heads::{box_class_head, mask_head, mask_target, pool_rois, Detection, HeadConfig, MASK_SIZE, NUM_CLASSES};
pub use loss::{total_loss, HeadOutput, LossTargets, LossTerms};
pub use roi_align::{roi_align, roi_level, POOL_SIZE};
pub use rpn::{rpn_forward, rpn_head, select_proposals, RpnOutput};
