//! End-to-end mask prediction for one image.

use irisseg_tensor::{bilinear_taps, kernels, Tensor};

use crate::detection::{Box, MASK_SIZE};
use crate::error::Result;
use crate::image::{Mask, RgbImage};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub mask: Mask,
    /// Box of the selected detection; `None` when nothing scored above the threshold.
    pub bbox: Option<Box>,
    pub score: f64,
    pub mask_logits: Option<Tensor>,
}

impl Inference {
    pub fn detected(&self) -> bool {
        self.bbox.is_some()
    }
}

/// Resizes sigmoid(`logits[28,28]`) bilinearly onto `bbox` and thresholds
/// at 0.5. Pixels whose centres fall outside the box stay background.
pub fn paste_mask(logits: &Tensor, bbox: &Box, width: usize, height: usize) -> Mask {
    let probs: Vec<f64> = logits.data().iter().map(|&z| kernels::sigmoid(z)).collect();
    let m = MASK_SIZE;
    let last = (m - 1) as f64;
    let mut mask = Mask::empty(width, height);
    let ys = (bbox.y1.floor().max(0.0) as usize)..(bbox.y2.ceil().max(0.0) as usize).min(height);
    for py in ys {
        let y = py as f64 + 0.5;
        if y < bbox.y1 || y > bbox.y2 {
            continue;
        }
        let v = ((y - bbox.y1) / bbox.height() * m as f64 - 0.5).clamp(0.0, last);
        let xs = (bbox.x1.floor().max(0.0) as usize)..(bbox.x2.ceil().max(0.0) as usize).min(width);
        for px in xs {
            let x = px as f64 + 0.5;
            if x < bbox.x1 || x > bbox.x2 {
                continue;
            }
            let u = ((x - bbox.x1) / bbox.width() * m as f64 - 0.5).clamp(0.0, last);
            let p: f64 = bilinear_taps(m, m, v, u)
                .expect("clamped coordinates")
                .iter()
                .map(|&(i, w)| w * probs[i])
                .sum();
            if p > 0.5 {
                mask.set(px, py, true);
            }
        }
    }
    mask
}

/// Best iris detection pasted onto an empty canvas. Scores at or below the
/// model's threshold yield an empty mask and no box.
pub fn infer_mask(model: &Model, image: &RgbImage) -> Result<Inference> {
    let empty = |score| Inference {
        mask: Mask::empty(image.width, image.height),
        bbox: None,
        score,
        mask_logits: None,
    };
    let Some(det) = model.detect(image)? else {
        return Ok(empty(0.0));
    };
    if det.score <= model.config.score_threshold {
        return Ok(empty(det.score));
    }
    Ok(Inference {
        mask: paste_mask(&det.mask_logits, &det.bbox, image.width, image.height),
        bbox: Some(det.bbox),
        score: det.score,
        mask_logits: Some(det.mask_logits),
    })
}
