//! ROI Align: fixed-size bilinear pooling of a box from a feature map.

use irisseg_tensor::{bilinear_taps, Taps, Tensor};

use super::boxes::Box;
use crate::error::{Error, Result};

pub const POOL_SIZE: usize = 7;
/// Bilinear samples per bin along each axis.
pub const BIN_SAMPLES: usize = 2;

/// Appends the taps pooling `bbox` (image coordinates) from a `[C,h,w]` map
/// stored at `offset` in a flat buffer. Rows are added in `[C,out,out]`
/// order. Sample points are clamped onto the map.
pub fn push_roi_taps(
    taps: &mut Taps,
    offset: usize,
    (c, h, w): (usize, usize, usize),
    bbox: &Box,
    stride: usize,
    out: usize,
) -> Result<()> {
    if !bbox.is_valid() {
        return Err(Error::Invalid(format!("degenerate ROI {bbox:?}")));
    }
    let s = stride as f64;
    let (x1, y1) = (bbox.x1 / s, bbox.y1 / s);
    let bin_w = (bbox.x2 / s - x1) / out as f64;
    let bin_h = (bbox.y2 / s - y1) / out as f64;
    let weight = 1.0 / (BIN_SAMPLES * BIN_SAMPLES) as f64;
    let (ymax, xmax) = ((h - 1) as f64, (w - 1) as f64);
    // Tap positions are shared by all channels.
    let mut cell_taps: Vec<Vec<(usize, f64)>> = Vec::with_capacity(out * out);
    for i in 0..out {
        for j in 0..out {
            let mut row = Vec::with_capacity(4 * BIN_SAMPLES * BIN_SAMPLES);
            for sy in 0..BIN_SAMPLES {
                let y = y1 + (i as f64 + (sy as f64 + 0.5) / BIN_SAMPLES as f64) * bin_h;
                for sx in 0..BIN_SAMPLES {
                    let x = x1 + (j as f64 + (sx as f64 + 0.5) / BIN_SAMPLES as f64) * bin_w;
                    for (idx, wt) in bilinear_taps(h, w, y.clamp(0.0, ymax), x.clamp(0.0, xmax))? {
                        if wt != 0.0 {
                            row.push((idx, wt * weight));
                        }
                    }
                }
            }
            cell_taps.push(row);
        }
    }
    for ch in 0..c {
        let base = offset + ch * h * w;
        for row in &cell_taps {
            for &(idx, wt) in row {
                taps.push(base + idx, wt);
            }
            taps.finish_row();
        }
    }
    Ok(())
}

/// Pools `bbox` from `map[C,h,w]` into `[C,out,out]`.
pub fn roi_align(map: &Tensor, bbox: &Box, stride: usize, out: usize) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("roi_align needs a [C,h,w] map, got {s:?}")));
    }
    let mut taps = Taps::new();
    push_roi_taps(&mut taps, 0, (s[0], s[1], s[2]), bbox, stride, out)?;
    let data = map.data();
    let values = (0..taps.rows()).map(|r| taps.row(r).map(|(i, w)| w * data[i]).sum()).collect();
    Ok(Tensor::new(&[s[0], out, out], values)?)
}

/// Pyramid level for a box of the given size: `floor(4 + log2(sqrt(area)/224))`
/// clamped into `[min_level, max_level]`.
pub fn roi_level(bbox: &Box, min_level: usize, max_level: usize) -> usize {
    let scale = bbox.area().sqrt().max(1e-6);
    let k = (4.0 + (scale / 224.0).log2()).floor();
    (k.max(min_level as f64).min(max_level as f64)) as usize
}
