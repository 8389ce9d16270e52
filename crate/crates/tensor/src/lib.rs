//! Minimal dense tensor library with tape-based reverse-mode gradients.

pub mod checkpoint;
mod error;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use params::{Bound, ParamStore, Sgd};
pub use tape::{Taps, Tape, Var};
pub use tensor::Tensor;

/// Bilinear interpolation of a `[C,H,W]` map at real coordinates `(y, x)`.
///
/// Returns the four `(flat offset within a plane, weight)` taps; integer
/// coordinates reproduce the grid value exactly.
pub fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> Result<[(usize, f64); 4]> {
    if !(y >= 0.0 && x >= 0.0 && y <= (h - 1) as f64 && x <= (w - 1) as f64) {
        return Err(TensorError::InvalidArgument {
            op: "bilinear_sample",
            detail: format!("({y}, {x}) outside [0,{}]x[0,{}]", h - 1, w - 1),
        });
    }
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Ok([
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ])
}

/// Samples every channel of a `[C,H,W]` map at `(y, x)`.
pub fn bilinear_sample(map: &Tensor, y: f64, x: f64) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "bilinear_sample",
            detail: format!("expected [C,H,W], got {s:?}"),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let taps = bilinear_taps(h, w, y, x)?;
    let out = (0..c)
        .map(|ch| {
            let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
            taps.iter().map(|&(i, wt)| wt * plane[i]).sum()
        })
        .collect();
    Tensor::new(&[c], out)
}
