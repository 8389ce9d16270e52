//! Image conversion, padding, ground-truth boxes and flip augmentation.

use irisseg_tensor::Tensor;
use rand::Rng;

use crate::datasets::Sample;
use crate::detection::Box;
use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask, RgbImage};

/// Spatial multiple required by the backbone.
pub const INPUT_MULTIPLE: usize = 32;
/// Pixels added on every side of the tight mask box.
pub const BOX_MARGIN: usize = 2;

pub fn grayscale_to_rgb(img: &GrayImage) -> RgbImage {
    RgbImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().flat_map(|&v| [v, v, v]).collect(),
    }
}

/// Tight box of the foreground grown by two pixels per side and clipped to
/// the image. Coordinates are pixel indices (inclusive extents).
pub fn derive_bbox_from_mask(mask: &Mask) -> Result<Box> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    let lo = |v: usize| v.saturating_sub(BOX_MARGIN) as f64;
    let hi = |v: usize, n: usize| (v + BOX_MARGIN).min(n - 1) as f64;
    let (bx0, by0, bx1, by1) = (lo(x0), lo(y0), hi(x1, mask.width), hi(y1, mask.height));
    // A single pixel on a one-pixel-wide image would otherwise collapse.
    Ok(Box {
        x1: bx0,
        y1: by0,
        x2: if bx1 > bx0 { bx1 } else { bx0 + 1.0 },
        y2: if by1 > by0 { by1 } else { by0 + 1.0 },
    })
}

/// Flips image and mask together with probability `flip_probability`.
pub fn augment(sample: &Sample, flip_probability: f64, rng: &mut impl Rng) -> Sample {
    if rng.gen::<f64>() < flip_probability {
        Sample {
            image: sample.image.flip_horizontal(),
            mask: sample.mask.flip_horizontal(),
            ..sample.clone()
        }
    } else {
        sample.clone()
    }
}

/// Mirror index into `0..n` without repeating the edge pixel.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

pub fn padded_size(width: usize, height: usize) -> (usize, usize) {
    (width.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE, height.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE)
}

/// Reflect-pads the right and bottom edges up to the next multiple of 32, so
/// image coordinates are unchanged.
pub fn pad_reflect(img: &RgbImage) -> RgbImage {
    let (w, h) = padded_size(img.width, img.height);
    if (w, h) == (img.width, img.height) {
        return img.clone();
    }
    let mut out = RgbImage::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, img.pixel(reflect(x, img.width), reflect(y, img.height)));
        }
    }
    out
}

/// Padded, normalised `[1,3,H,W]` network input.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let p = pad_reflect(img);
    let (w, h) = (p.width, p.height);
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let r = i % (h * w);
        (p.data[r * 3 + c] as f64 - 128.0) / 64.0
    })
}
