//! Square anchors and their training labels.

use rand::seq::SliceRandom;
use rand::Rng;

use super::boxes::{iou, Box, BoxDelta};
use crate::error::{Error, Result};

/// One square anchor of `size` pixels centred on every cell of a level with
/// the given `stride`, for each `(stride, size)` pair. Cells are visited
/// level by level in row-major order.
pub fn generate_anchors(image_h: usize, image_w: usize, levels: &[(usize, f64)]) -> Result<Vec<Box>> {
    let mut out = Vec::new();
    for &(stride, size) in levels {
        if stride == 0 || image_h % stride != 0 || image_w % stride != 0 {
            return Err(Error::Invalid(format!(
                "stride {stride} does not divide image {image_w}x{image_h}"
            )));
        }
        let half = size / 2.0;
        for y in 0..image_h / stride {
            for x in 0..image_w / stride {
                let cx = (x as f64 + 0.5) * stride as f64;
                let cy = (y as f64 + 0.5) * stride as f64;
                out.push(Box {
                    x1: cx - half,
                    y1: cy - half,
                    x2: cx + half,
                    y2: cy + half,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// Regression target of every anchor towards the ground truth.
    pub deltas: Vec<BoxDelta>,
}

pub const RPN_POSITIVE_IOU: f64 = 0.7;
pub const RPN_NEGATIVE_IOU: f64 = 0.3;

/// Positive at IoU >= 0.7 or for the first anchor attaining the highest IoU,
/// negative at IoU <= 0.3, ignored otherwise.
pub fn assign_rpn_targets(anchors: &[Box], gt: &Box) -> RpnTargets {
    let ious: Vec<f64> = anchors.iter().map(|a| iou(a, gt)).collect();
    let best = ious
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i);
    let labels = ious
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v >= RPN_POSITIVE_IOU || Some(i) == best {
                AnchorLabel::Positive
            } else if v <= RPN_NEGATIVE_IOU {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    let deltas = anchors.iter().map(|a| BoxDelta::encode(gt, a)).collect();
    RpnTargets { labels, deltas }
}

/// Picks at most `batch` labelled anchors, at most half of them positive.
/// Returns `(anchor index, is_positive)` sorted by anchor index.
pub fn sample_anchors(labels: &[AnchorLabel], batch: usize, rng: &mut impl Rng) -> Vec<(usize, bool)> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Positive).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(batch / 2);
    neg.truncate(batch - pos.len());
    let mut out: Vec<(usize, bool)> = pos.into_iter().map(|i| (i, true)).chain(neg.into_iter().map(|i| (i, false))).collect();
    out.sort_unstable();
    out
}
