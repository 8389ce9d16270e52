//! Cumulative multi-task loss.

use irisseg_tensor::{Taps, Tape, Tensor, Var};

use super::heads::{select_mask_channel, select_rows, IRIS};
use super::rpn::RpnOutput;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Class logits `[R,2]`.
    pub class_logits: Var,
    /// Per-class box deltas `[R,8]`.
    pub box_deltas: Var,
    /// Mask logits `[P,2,28,28]` for the positive ROIs, in ROI order.
    pub mask_logits: Option<Var>,
}

/// Everything the loss compares against, fixed before the head pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTargets {
    /// Sampled anchors as `(index, is_positive)`.
    pub rpn_samples: Vec<(usize, bool)>,
    /// Regression targets of the positive sampled anchors, in sample order.
    pub rpn_deltas: Vec<[f64; 4]>,
    /// Class label of every ROI.
    pub roi_labels: Vec<usize>,
    /// Regression targets of the positive ROIs, in ROI order.
    pub roi_deltas: Vec<[f64; 4]>,
    /// Flattened `[P,28,28]` binary mask targets of the positive ROIs.
    pub mask_targets: Vec<f64>,
}

impl LossTargets {
    pub fn positive_rois(&self) -> Vec<usize> {
        (0..self.roi_labels.len()).filter(|&i| self.roi_labels[i] == IRIS).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rpn_objectness: Var,
    pub rpn_box: Var,
    pub class: Var,
    pub bbox: Var,
    pub mask: Var,
    pub total: Var,
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Sum of RPN objectness BCE, RPN smooth-L1 over positive anchors, head
/// softmax cross-entropy, head smooth-L1 on the iris deltas of positive ROIs
/// and mask BCE on the iris channel of positive ROIs. Smooth-L1 sums are
/// divided by the number of positives; terms without positives are zero.
pub fn total_loss(tape: &mut Tape, rpn: &RpnOutput, head: &HeadOutput, t: &LossTargets) -> Result<LossTerms> {
    let rpn_objectness = if t.rpn_samples.is_empty() {
        zero(tape)
    } else {
        let idx: Vec<usize> = t.rpn_samples.iter().map(|s| s.0).collect();
        let labels: Vec<f64> = t.rpn_samples.iter().map(|s| if s.1 { 1.0 } else { 0.0 }).collect();
        let picked = tape.gather(rpn.logits, Taps::gather(&idx), &[idx.len()])?;
        tape.bce_with_logits_mean(picked, &labels)?
    };

    let pos_anchors: Vec<usize> = t.rpn_samples.iter().filter(|s| s.1).map(|s| s.0).collect();
    if pos_anchors.len() != t.rpn_deltas.len() {
        return Err(Error::Invalid("RPN delta targets do not match positive anchors".into()));
    }
    let rpn_box = if pos_anchors.is_empty() {
        zero(tape)
    } else {
        let sel = select_rows(tape, rpn.deltas, &pos_anchors)?;
        let target: Vec<f64> = t.rpn_deltas.iter().flatten().copied().collect();
        let s = tape.smooth_l1_sum(sel, &target)?;
        tape.scale(s, 1.0 / pos_anchors.len() as f64)
    };

    let class = if t.roi_labels.is_empty() {
        zero(tape)
    } else {
        tape.softmax_cross_entropy_mean(head.class_logits, &t.roi_labels)?
    };

    let pos = t.positive_rois();
    if pos.len() != t.roi_deltas.len() {
        return Err(Error::Invalid("ROI delta targets do not match positive ROIs".into()));
    }
    let (bbox, mask) = if pos.is_empty() {
        (zero(tape), zero(tape))
    } else {
        let cols: Vec<usize> = pos.iter().flat_map(|&r| (0..4).map(move |k| r * 8 + IRIS * 4 + k)).collect();
        let sel = tape.gather(head.box_deltas, Taps::gather(&cols), &[pos.len(), 4])?;
        let target: Vec<f64> = t.roi_deltas.iter().flatten().copied().collect();
        let s = tape.smooth_l1_sum(sel, &target)?;
        let bbox = tape.scale(s, 1.0 / pos.len() as f64);
        let logits = head
            .mask_logits
            .ok_or_else(|| Error::Invalid("positive ROIs without mask logits".into()))?;
        let iris = select_mask_channel(tape, logits, IRIS)?;
        let mask = tape.bce_with_logits_mean(iris, &t.mask_targets)?;
        (bbox, mask)
    };
    let total = tape.add_all(&[rpn_objectness, rpn_box, class, bbox, mask])?;
    Ok(LossTerms {
        rpn_objectness,
        rpn_box,
        class,
        bbox,
        mask,
        total,
    })
}
