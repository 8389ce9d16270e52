//! Region proposal head shared across pyramid levels.

use irisseg_tensor::{kernels, Bound, ParamStore, Taps, Tape, Var};
use rand::Rng;

use super::boxes::{nms_indices, Box, BoxDelta, Proposal};
use crate::backbone::{conv, init_conv, FeaturePyramid};
use crate::error::{Error, Result};

/// Per-anchor outputs concatenated over levels in anchor order.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// Objectness logits `[A]`.
    pub logits: Var,
    /// Box deltas `[A,4]`.
    pub deltas: Var,
}

pub fn init_rpn(channels: usize, store: &mut ParamStore, rng: &mut impl Rng) {
    init_conv(store, "rpn.conv", [channels, channels, 3, 3], 0.5, rng);
    init_conv(store, "rpn.cls", [1, channels, 1, 1], 0.02, rng);
    init_conv(store, "rpn.box", [4, channels, 1, 1], 0.02, rng);
}

/// Applies the shared 3x3 conv and the 1x1 objectness and delta convs to
/// the pyramid levels with the given strides, in that order.
pub fn rpn_head(tape: &mut Tape, p: &Bound, pyramid: &FeaturePyramid, strides: &[usize]) -> Result<RpnOutput> {
    let mut logits = Vec::with_capacity(strides.len());
    let mut deltas = Vec::with_capacity(strides.len());
    for &stride in strides {
        let map = pyramid
            .at_stride(stride)
            .ok_or_else(|| Error::Invalid(format!("pyramid has no level with stride {stride}")))?;
        let h = conv(tape, p, "rpn.conv", map, 1, 1)?;
        let h = tape.relu(h);
        let obj = conv(tape, p, "rpn.cls", h, 1, 0)?;
        let del = conv(tape, p, "rpn.box", h, 1, 0)?;
        let cells = tape.shape(obj)[2] * tape.shape(obj)[3];
        logits.push(tape.reshape(obj, &[cells])?);
        // [1,4,h,w] -> [h*w,4]
        let idx: Vec<usize> = (0..cells).flat_map(|c| (0..4).map(move |k| k * cells + c)).collect();
        deltas.push(tape.gather(del, Taps::gather(&idx), &[cells, 4])?);
    }
    Ok(RpnOutput {
        logits: tape.concat(&logits)?,
        deltas: tape.concat(&deltas)?,
    })
}

/// Decodes every anchor, clips to the image, drops boxes under one pixel,
/// suppresses overlaps above `nms_threshold` and keeps the best `top_n`.
pub fn select_proposals(
    logits: &[f64],
    deltas: &[f64],
    anchors: &[Box],
    (width, height): (f64, f64),
    nms_threshold: f64,
    top_n: usize,
) -> Vec<Proposal> {
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let b = BoxDelta::from_slice(&deltas[4 * i..4 * i + 4]).decode(a).clip(width, height);
        if b.width() >= 1.0 && b.height() >= 1.0 {
            boxes.push(b);
            scores.push(logits[i]);
        }
    }
    let mut keep = nms_indices(&boxes, &scores, nms_threshold);
    keep.truncate(top_n);
    keep.into_iter()
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: kernels::sigmoid(scores[i]),
        })
        .collect()
}

/// Head outputs plus the proposals they induce.
pub fn rpn_forward(
    tape: &mut Tape,
    p: &Bound,
    pyramid: &FeaturePyramid,
    anchors: &[Box],
    strides: &[usize],
    image_size: (f64, f64),
    nms_threshold: f64,
    top_n: usize,
) -> Result<(RpnOutput, Vec<Proposal>)> {
    let out = rpn_head(tape, p, pyramid, strides)?;
    if tape.shape(out.logits)[0] != anchors.len() {
        return Err(Error::Invalid(format!(
            "{} anchors for {} RPN cells",
            anchors.len(),
            tape.shape(out.logits)[0]
        )));
    }
    let props = select_proposals(
        tape.value(out.logits).data(),
        tape.value(out.deltas).data(),
        anchors,
        image_size,
        nms_threshold,
        top_n,
    );
    Ok((out, props))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_returns_clipped_anchors() {
        let anchors = vec![
            Box::new(-10.0, -10.0, 20.0, 20.0).unwrap(),
            Box::new(40.0, 40.0, 60.0, 60.0).unwrap(),
        ];
        let props = select_proposals(&[0.0, 0.0], &[0.0; 8], &anchors, (50.0, 50.0), 0.7, 10);
        assert_eq!(props.len(), 2);
        assert_eq!(props[0].bbox, Box::new(0.0, 0.0, 20.0, 20.0).unwrap());
        assert_eq!(props[1].bbox, Box::new(40.0, 40.0, 50.0, 50.0).unwrap());
        assert!(props.iter().all(|p| p.objectness == 0.5));
    }

    #[test]
    fn top_n_and_bounds() {
        let anchors: Vec<Box> = (0..20)
            .map(|i| Box::new(i as f64 * 10.0 - 5.0, 0.0, i as f64 * 10.0 + 5.0, 30.0).unwrap())
            .collect();
        let logits: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let deltas = vec![0.3; 80];
        let props = select_proposals(&logits, &deltas, &anchors, (100.0, 25.0), 0.7, 4);
        assert_eq!(props.len(), 4);
        assert!(props.windows(2).all(|w| w[0].objectness >= w[1].objectness));
        assert!(props.iter().all(|p| p.bbox.x1 >= 0.0 && p.bbox.x2 <= 100.0 && p.bbox.y2 <= 25.0));
    }
}
