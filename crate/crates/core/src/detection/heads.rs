//! Class, box and mask heads on ROI-aligned features.

use irisseg_tensor::{Bound, ParamStore, Taps, Tape, Tensor, Var};
use rand::Rng;

use super::boxes::Box;
use super::roi_align::{push_roi_taps, roi_level, POOL_SIZE};
use crate::backbone::{init_conv, FeaturePyramid};
use crate::error::{Error, Result};
use crate::image::Mask;

pub const NUM_CLASSES: usize = 2;
pub const IRIS: usize = 1;
pub const MASK_SIZE: usize = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub fc_dim: usize,
    pub mask_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            fc_dim: 256,
            mask_channels: 32,
        }
    }
}

/// Final detection for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box,
    /// Background and iris probabilities.
    pub class_probs: [f64; NUM_CLASSES],
    /// Iris-channel mask logits `[28,28]`.
    pub mask_logits: Tensor,
    pub score: f64,
}

fn init_dense(store: &mut ParamStore, name: &str, d: usize, m: usize, std: f64, rng: &mut impl Rng) {
    store.insert(format!("{name}.w"), Tensor::randn(&[d, m], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[m]));
}

pub fn init_heads(channels: usize, cfg: &HeadConfig, store: &mut ParamStore, rng: &mut impl Rng) {
    let flat = channels * POOL_SIZE * POOL_SIZE;
    init_dense(store, "head.fc", flat, cfg.fc_dim, (2.0 / flat as f64).sqrt(), rng);
    init_dense(store, "head.cls", cfg.fc_dim, NUM_CLASSES, 0.01, rng);
    init_dense(store, "head.box", cfg.fc_dim, 4 * NUM_CLASSES, 0.001, rng);
    let mc = cfg.mask_channels;
    init_conv(store, "mask.conv", [channels, channels, 3, 3], 1.0, rng);
    // Transposed kernels are [in, out, kh, kw]; each output pixel sees one tap
    // per input channel.
    for (name, cin, cout) in [("mask.deconv1", channels, mc), ("mask.deconv2", mc, mc)] {
        store.insert(format!("{name}.w"), Tensor::randn(&[cin, cout, 2, 2], (2.0 / cin as f64).sqrt(), rng));
        store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
    init_conv(store, "mask.logits", [NUM_CLASSES, mc, 1, 1], 0.05, rng);
}

/// ROI-aligns every box from the pyramid level picked by its size and
/// stacks the results into `[R,C,7,7]`. Levels with strides 4..32 are
/// eligible; a pyramid with a single level uses it for every box.
pub fn pool_rois(tape: &mut Tape, pyramid: &FeaturePyramid, boxes: &[Box]) -> Result<Var> {
    let mut eligible: Vec<(usize, usize, Var)> = pyramid
        .levels
        .iter()
        .filter(|l| (4..=32).contains(&l.0))
        .map(|&(s, v)| (s.trailing_zeros() as usize, s, v))
        .collect();
    if eligible.is_empty() {
        eligible = pyramid.levels.iter().map(|&(s, v)| (s.trailing_zeros() as usize, s, v)).collect();
    }
    if eligible.is_empty() || boxes.is_empty() {
        return Err(Error::Invalid("ROI pooling needs at least one level and one box".into()));
    }
    let (min_level, max_level) = (eligible[0].0, eligible[eligible.len() - 1].0);
    let mut flats = Vec::with_capacity(eligible.len());
    let mut offsets = Vec::with_capacity(eligible.len());
    let mut dims = Vec::with_capacity(eligible.len());
    let mut at = 0;
    for &(_, _, v) in &eligible {
        let s = tape.shape(v).to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        flats.push(tape.reshape(v, &[c * h * w])?);
        offsets.push(at);
        dims.push((c, h, w));
        at += c * h * w;
    }
    let all = if flats.len() == 1 { flats[0] } else { tape.concat(&flats)? };
    let c = dims[0].0;
    let mut taps = Taps::new();
    for b in boxes {
        let level = if eligible.len() == 1 {
            min_level
        } else {
            roi_level(b, min_level, max_level)
        };
        let k = eligible.iter().position(|e| e.0 == level).unwrap_or(0);
        push_roi_taps(&mut taps, offsets[k], dims[k], b, eligible[k].1, POOL_SIZE)?;
    }
    Ok(tape.gather(all, taps, &[boxes.len(), c, POOL_SIZE, POOL_SIZE])?)
}

/// Returns class logits `[R,2]` and per-class box deltas `[R,8]`.
pub fn box_class_head(tape: &mut Tape, p: &Bound, pooled: Var) -> Result<(Var, Var)> {
    let s = tape.shape(pooled).to_vec();
    let flat = tape.reshape(pooled, &[s[0], s[1] * s[2] * s[3]])?;
    let h = tape.dense(flat, p.get("head.fc.w"), p.get("head.fc.b"))?;
    let h = tape.relu(h);
    let cls = tape.dense(h, p.get("head.cls.w"), p.get("head.cls.b"))?;
    let deltas = tape.dense(h, p.get("head.box.w"), p.get("head.box.b"))?;
    Ok((cls, deltas))
}

/// Mask logits `[R,2,28,28]`: 3x3 conv, two stride-2 transposed convs, 1x1.
pub fn mask_head(tape: &mut Tape, p: &Bound, pooled: Var) -> Result<Var> {
    let h = crate::backbone::conv(tape, p, "mask.conv", pooled, 1, 1)?;
    let h = tape.relu(h);
    let h = tape.conv_transpose2d(h, p.get("mask.deconv1.w"), p.get("mask.deconv1.b"), 2)?;
    let h = tape.relu(h);
    let h = tape.conv_transpose2d(h, p.get("mask.deconv2.w"), p.get("mask.deconv2.b"), 2)?;
    let h = tape.relu(h);
    crate::backbone::conv(tape, p, "mask.logits", h, 1, 0)
}

/// Rows `rows` of a tensor whose leading dimension indexes ROIs.
pub fn select_rows(tape: &mut Tape, x: Var, rows: &[usize]) -> Result<Var> {
    let mut shape = tape.shape(x).to_vec();
    let inner: usize = shape[1..].iter().product();
    let idx: Vec<usize> = rows.iter().flat_map(|&r| r * inner..(r + 1) * inner).collect();
    shape[0] = rows.len();
    Ok(tape.gather(x, Taps::gather(&idx), &shape)?)
}

/// Channel `class` of mask logits `[R,K,m,m]` as `[R,m,m]`.
pub fn select_mask_channel(tape: &mut Tape, logits: Var, class: usize) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let plane = s[2] * s[3];
    let idx: Vec<usize> = (0..s[0])
        .flat_map(|r| {
            let base = (r * s[1] + class) * plane;
            base..base + plane
        })
        .collect();
    Ok(tape.gather(logits, Taps::gather(&idx), &[s[0], s[2], s[3]])?)
}

/// Ground-truth mask resampled into the `size x size` grid of `roi`: each
/// cell takes the pixel under its centre, background outside the mask.
pub fn mask_target(gt: &Mask, roi: &Box, size: usize) -> Vec<f64> {
    let pixel = |v: f64, n: usize| (v >= 0.0 && v < n as f64).then(|| v as usize);
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let py = pixel(roi.y1 + (i as f64 + 0.5) * roi.height() / size as f64, gt.height);
        for j in 0..size {
            let px = pixel(roi.x1 + (j as f64 + 0.5) * roi.width() / size as f64, gt.width);
            let on = matches!((px, py), (Some(x), Some(y)) if gt.get(x, y));
            out.push(if on { 1.0 } else { 0.0 });
        }
    }
    out
}
