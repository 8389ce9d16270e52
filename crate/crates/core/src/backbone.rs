//! Five-stage residual backbone and feature pyramid.
//!
//! Stage `i` runs at stride `2^i`: a stride-2 3x3 convolution followed by
//! `blocks_per_stage` residual blocks `relu(x + conv(relu(conv(x))))`.
//! The pyramid projects C2..C5 to a common width with 1x1 laterals, merges
//! them top-down with nearest x2 upsampling, smooths each level with a 3x3
//! convolution and adds P6 by stride-2 subsampling of P5.

use irisseg_tensor::{Bound, ParamStore, Taps, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 5],
    pub blocks_per_stage: usize,
    pub input_channels: usize,
    /// Identity shortcuts inside residual blocks; off only for ablations.
    pub skip_connections: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64, 128],
            blocks_per_stage: 1,
            input_channels: 3,
            skip_connections: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpnConfig {
    pub channels: usize,
    /// Top-down merging; off only for ablations.
    pub top_down: bool,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            top_down: true,
        }
    }
}

/// Pyramid levels P2..P6 as `(stride, map[1,C,h,w])`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<(usize, Var)>,
}

impl FeaturePyramid {
    /// Map at the given stride.
    pub fn at_stride(&self, stride: usize) -> Option<Var> {
        self.levels.iter().find(|l| l.0 == stride).map(|l| l.1)
    }
}

/// He-normal initialisation for a conv kernel `[K,C,kh,kw]` plus zero bias.
pub(crate) fn init_conv(store: &mut ParamStore, name: &str, shape: [usize; 4], gain: f64, rng: &mut impl Rng) {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    store.insert(format!("{name}.w"), Tensor::randn(&shape, gain * (2.0 / fan_in).sqrt(), rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[shape[0]]));
}

pub fn init_backbone(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) {
    let mut prev = cfg.input_channels;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        let stage = format!("backbone.stage{}", i + 1);
        init_conv(store, &format!("{stage}.down"), [c, prev, 3, 3], 1.0, rng);
        for b in 0..cfg.blocks_per_stage {
            init_conv(store, &format!("{stage}.block{b}.conv1"), [c, c, 3, 3], 1.0, rng);
            init_conv(store, &format!("{stage}.block{b}.conv2"), [c, c, 3, 3], 0.5, rng);
        }
        prev = c;
    }
}

pub fn init_fpn(backbone: &BackboneConfig, cfg: &FpnConfig, store: &mut ParamStore, rng: &mut impl Rng) {
    for level in 2..=5 {
        let c_in = backbone.stage_channels[level - 1];
        init_conv(store, &format!("fpn.lateral{level}"), [cfg.channels, c_in, 1, 1], 0.7, rng);
        init_conv(store, &format!("fpn.output{level}"), [cfg.channels, cfg.channels, 3, 3], 0.7, rng);
    }
}

pub(crate) fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    Ok(tape.conv2d(x, w, b, stride, padding)?)
}

/// Runs the five stages on `image[1,C,H,W]` and returns C2..C5.
pub fn backbone_forward(tape: &mut Tape, p: &Bound, cfg: &BackboneConfig, image: Var) -> Result<[Var; 4]> {
    let s = tape.shape(image).to_vec();
    if s.len() != 4 || s[1] != cfg.input_channels {
        return Err(Error::Dimension(format!(
            "backbone expects [1,{},H,W], got {s:?}",
            cfg.input_channels
        )));
    }
    if s[2] % 32 != 0 || s[3] % 32 != 0 {
        return Err(Error::Dimension(format!(
            "backbone input {}x{} is not divisible by 32",
            s[3], s[2]
        )));
    }
    let mut x = image;
    let mut outs = Vec::with_capacity(4);
    for i in 1..=5 {
        let stage = format!("backbone.stage{i}");
        let d = conv(tape, p, &format!("{stage}.down"), x, 2, 1)?;
        x = tape.relu(d);
        for b in 0..cfg.blocks_per_stage {
            let h = conv(tape, p, &format!("{stage}.block{b}.conv1"), x, 1, 1)?;
            let h = tape.relu(h);
            let h = conv(tape, p, &format!("{stage}.block{b}.conv2"), h, 1, 1)?;
            let sum = if cfg.skip_connections { tape.add(h, x)? } else { h };
            x = tape.relu(sum);
        }
        if i >= 2 {
            outs.push(x);
        }
    }
    Ok([outs[0], outs[1], outs[2], outs[3]])
}

/// Every other row and column of the last two dimensions of `[N,C,h,w]`.
fn subsample2(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                idx.push(p * h * w + 2 * i * w + 2 * j);
            }
        }
    }
    Ok(tape.gather(x, Taps::gather(&idx), &[s[0], s[1], oh, ow])?)
}

/// Builds P2..P6 (strides 4..64) from C2..C5.
pub fn fpn_forward(tape: &mut Tape, p: &Bound, cfg: &FpnConfig, stages: &[Var; 4]) -> Result<FeaturePyramid> {
    let mut merged: [Option<Var>; 4] = [None; 4];
    for k in (0..4).rev() {
        let level = k + 2;
        let lat = conv(tape, p, &format!("fpn.lateral{level}"), stages[k], 1, 0)?;
        merged[k] = Some(match merged.get(k + 1).copied().flatten() {
            Some(top) if cfg.top_down => {
                let up = tape.upsample_nearest2x(top)?;
                if tape.shape(up) != tape.shape(lat) {
                    return Err(Error::Dimension(format!(
                        "top-down map {:?} does not match lateral {:?}",
                        tape.shape(up),
                        tape.shape(lat)
                    )));
                }
                tape.add(lat, up)?
            }
            _ => lat,
        });
    }
    let mut levels = Vec::with_capacity(5);
    for (k, m) in merged.iter().enumerate() {
        let level = k + 2;
        let out = conv(tape, p, &format!("fpn.output{level}"), m.unwrap(), 1, 1)?;
        levels.push((1usize << level, out));
    }
    let p6 = subsample2(tape, levels[3].1)?;
    levels.push((64, p6));
    Ok(FeaturePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> (BackboneConfig, FpnConfig, ParamStore) {
        let (b, f) = (BackboneConfig::default(), FpnConfig::default());
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_backbone(&b, &mut s, &mut rng);
        init_fpn(&b, &f, &mut s, &mut rng);
        (b, f, s)
    }

    fn image(tape: &mut Tape, size: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.constant(Tensor::uniform(&[1, 3, size, size], -1.0, 1.0, &mut rng))
    }

    #[test]
    fn stage_and_level_sizes() {
        let (b, f, s) = store(0);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, |_| false);
        let x = image(&mut tape, 160, 1);
        let c = backbone_forward(&mut tape, &p, &b, x).unwrap();
        let sizes: Vec<usize> = c.iter().map(|&v| tape.shape(v)[2]).collect();
        assert_eq!(sizes, vec![40, 20, 10, 5]);
        let pyr = fpn_forward(&mut tape, &p, &f, &c).unwrap();
        let strides: Vec<usize> = pyr.levels.iter().map(|l| l.0).collect();
        assert_eq!(strides, vec![4, 8, 16, 32, 64]);
        for &(stride, v) in &pyr.levels {
            assert_eq!(tape.shape(v), &[1, 32, 160usize.div_ceil(stride), 160usize.div_ceil(stride)]);
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let (b, _, s) = store(0);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, |_| false);
        let x = image(&mut tape, 48, 1);
        assert!(matches!(backbone_forward(&mut tape, &p, &b, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_weights_zero_input_gives_zero_stages() {
        let (b, _, mut s) = store(0);
        for (_, t) in s.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let c = backbone_forward(&mut tape, &p, &b, x).unwrap();
        assert!(c.iter().all(|&v| tape.value(v).data().iter().all(|&z| z == 0.0)));
    }

    #[test]
    fn skip_and_top_down_paths_are_live() {
        let (b, f, s) = store(3);
        let run = |b: &BackboneConfig, f: &FpnConfig| {
            let mut tape = Tape::new();
            let p = s.bind(&mut tape, |_| false);
            let x = image(&mut tape, 64, 4);
            let c = backbone_forward(&mut tape, &p, b, x).unwrap();
            let pyr = fpn_forward(&mut tape, &p, f, &c).unwrap();
            (
                tape.value(c[3]).data().to_vec(),
                tape.value(pyr.at_stride(16).unwrap()).data().to_vec(),
            )
        };
        let (c5, p4) = run(&b, &f);
        let no_skip = BackboneConfig {
            skip_connections: false,
            ..b.clone()
        };
        assert_ne!(run(&no_skip, &f).0, c5);
        let no_top = FpnConfig {
            top_down: false,
            ..f.clone()
        };
        assert_ne!(run(&b, &no_top).1, p4);
    }

    #[test]
    fn disabled_top_down_leaves_p5_as_projected_c5() {
        let (b, f, mut s) = store(5);
        for level in 2..=5 {
            s.get_mut(&format!("fpn.output{level}.w")).unwrap().data_mut().fill(0.0);
            let w = s.get_mut(&format!("fpn.output{level}.w")).unwrap();
            // Centre tap identity: output conv passes its input through.
            for c in 0..32 {
                let off = w.offset(&[c, c, 1, 1]);
                w.data_mut()[off] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, |_| false);
        let x = image(&mut tape, 64, 6);
        let c = backbone_forward(&mut tape, &p, &b, x).unwrap();
        let pyr = fpn_forward(&mut tape, &p, &f, &c).unwrap();
        let lat = conv(&mut tape, &p, "fpn.lateral5", c[3], 1, 0).unwrap();
        let p5 = tape.value(pyr.at_stride(32).unwrap()).data();
        for (a, b) in p5.iter().zip(tape.value(lat).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
