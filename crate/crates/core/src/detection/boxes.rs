//! Axis-aligned boxes, overlap, suppression and the box-delta parametrisation.

use crate::error::{Error, Result};

/// Rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::Invalid(format!("degenerate box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Clamps all coordinates into `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    /// Mirror image under `x -> extent - x`.
    pub fn flip_horizontal(&self, extent: f64) -> Self {
        Self {
            x1: extent - self.x2,
            y1: self.y1,
            x2: extent - self.x1,
            y2: self.y2,
        }
    }
}

pub fn iou(a: &Box, b: &Box) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: Box,
    pub objectness: f64,
}

/// Greedy suppression: visits boxes by descending score (ties keep input
/// order) and drops any box whose IoU with an already kept box exceeds
/// `threshold`. Returns kept indices in score order.
pub fn nms_indices(boxes: &[Box], scores: &[f64], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(proposals: &[Proposal], threshold: f64) -> Vec<Proposal> {
    let boxes: Vec<Box> = proposals.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = proposals.iter().map(|p| p.objectness).collect();
    nms_indices(&boxes, &scores, threshold)
        .into_iter()
        .map(|i| proposals[i])
        .collect()
}

/// Centre offsets relative to the reference size and log size ratios.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

/// Largest log-scale change applied when decoding.
const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl BoxDelta {
    pub fn encode(target: &Box, reference: &Box) -> Self {
        let (cx, cy) = target.center();
        let (rx, ry) = reference.center();
        Self {
            dx: (cx - rx) / reference.width(),
            dy: (cy - ry) / reference.height(),
            dw: (target.width() / reference.width()).ln(),
            dh: (target.height() / reference.height()).ln(),
        }
    }

    pub fn decode(&self, reference: &Box) -> Box {
        let (rx, ry) = reference.center();
        let cx = rx + self.dx * reference.width();
        let cy = ry + self.dy * reference.height();
        let w = reference.width() * self.dw.min(MAX_LOG_RATIO).exp();
        let h = reference.height() * self.dh.min(MAX_LOG_RATIO).exp();
        Box {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }

    /// Componentwise product with `w`.
    pub fn scaled(self, w: [f64; 4]) -> Self {
        Self {
            dx: self.dx * w[0],
            dy: self.dy * w[1],
            dw: self.dw * w[2],
            dh: self.dh * w[3],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Box {
        Box::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(Box::new(1.0, 1.0, 1.0, 4.0).is_err());
        assert!(Box::new(0.0, f64::NAN, 1.0, 4.0).is_err());
    }

    #[test]
    fn nms_cases() {
        let p = Proposal {
            bbox: b(0.0, 0.0, 4.0, 4.0),
            objectness: 0.8,
        };
        assert_eq!(nms(&[p], 0.5), vec![p]);
        let q = Proposal { objectness: 0.9, ..p };
        assert_eq!(nms(&[p, q], 0.5), vec![q]);
    }

    #[test]
    fn delta_round_trip() {
        let anchor = b(10.0, 20.0, 74.0, 84.0);
        let target = b(3.5, 31.0, 90.0, 70.25);
        let d = BoxDelta::encode(&target, &anchor);
        let back = d.decode(&anchor);
        for (u, v) in [(back.x1, target.x1), (back.y1, target.y1), (back.x2, target.x2), (back.y2, target.y2)] {
            assert!((u - v).abs() < 1e-9);
        }
        assert_eq!(BoxDelta::encode(&anchor, &anchor).to_array(), [0.0; 4]);
    }

    #[test]
    fn flip_is_involution() {
        let a = b(3.0, 4.0, 9.0, 7.0);
        assert_eq!(a.flip_horizontal(20.0).flip_horizontal(20.0), a);
    }
}
