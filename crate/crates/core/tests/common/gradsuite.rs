//! Finite-difference checks of every differentiable operation, each over
//! `TRIALS` random instances.

use irisseg::backbone::{backbone_forward, fpn_forward, init_backbone, init_fpn, FeaturePyramid};
use irisseg::detection::heads::init_heads;
use irisseg::detection::rpn::init_rpn;
use irisseg::detection::{box_class_head, mask_head, pool_rois, rpn_head, Box, POOL_SIZE};
use irisseg::image::{Mask, RgbImage};
use irisseg::model::{GroundTruth, Model};
use irisseg::pipeline::{derive_bbox_from_mask, image_tensor};
use irisseg_tensor::{bilinear_taps, ParamStore, Taps, Tensor};
use rand::Rng;

use super::{check_inputs, check_store, rand_tensor, rng, tiny_config, weighted_sum, Check, Stats};

pub const TRIALS: u64 = 20;

pub type Suite = (&'static str, fn(u64) -> Check);

/// Runs `TRIALS` instances of a suite. Kinks may not exceed one percent of
/// the compared entries.
pub fn run(suite: &Suite) -> Check {
    let mut total = Stats::default();
    for trial in 0..TRIALS {
        total = total.merge((suite.1)(trial).map_err(|e| format!("trial {trial}: {e}"))?);
    }
    if total.kinks * 100 > total.checked {
        return Err(format!("{} of {} entries sit on kinks", total.kinks, total.checked));
    }
    Ok(total)
}

pub fn all() -> Vec<Suite> {
    vec![
        ("add/mul/scale", arithmetic),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("softmax", softmax),
        ("sum/mean/add_all", reductions),
        ("conv2d", conv2d),
        ("conv_transpose2d", conv_transpose2d),
        ("maxpool2d", maxpool2d),
        ("upsample_nearest2x", upsample),
        ("dense", dense),
        ("gather", gather),
        ("concat", concat),
        ("smooth_l1_sum", smooth_l1),
        ("bce_with_logits_mean", bce),
        ("softmax_cross_entropy_mean", cross_entropy),
        ("backbone+fpn", backbone_fpn),
        ("roi pooling", roi_pooling),
        ("rpn head", rpn),
        ("box/class head", box_class),
        ("mask head", mask),
        ("total_loss", total_loss),
    ]
}

fn arithmetic(trial: u64) -> Check {
    let mut r = rng(trial);
    let (a, b) = (rand_tensor(&[3, 4], &mut r), rand_tensor(&[3, 4], &mut r));
    check_inputs(&[a, b], |t, v| {
        let m = t.mul(v[0], v[1]).unwrap();
        let s = t.add(m, v[0]).unwrap();
        let s = t.scale(s, -1.5);
        weighted_sum(t, s, trial)
    })
}

fn relu(trial: u64) -> Check {
    let x = rand_tensor(&[4, 5], &mut rng(100 + trial));
    check_inputs(&[x], |t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, trial)
    })
}

fn sigmoid(trial: u64) -> Check {
    let x = Tensor::uniform(&[4, 5], -4.0, 4.0, &mut rng(200 + trial));
    check_inputs(&[x], |t, v| {
        let y = t.sigmoid(v[0]);
        weighted_sum(t, y, trial)
    })
}

fn softmax(trial: u64) -> Check {
    let x = Tensor::uniform(&[3, 4], -3.0, 3.0, &mut rng(300 + trial));
    check_inputs(&[x], |t, v| {
        let y = t.softmax(v[0]);
        weighted_sum(t, y, trial)
    })
}

fn reductions(trial: u64) -> Check {
    let mut r = rng(400 + trial);
    let (a, b) = (rand_tensor(&[2, 3], &mut r), rand_tensor(&[5], &mut r));
    check_inputs(&[a, b], |t, v| {
        let m = t.mean(v[0]);
        let sq = t.mul(v[1], v[1]).unwrap();
        let s = t.sum(sq);
        let mm = t.mul(m, s).unwrap();
        t.add_all(&[m, s, mm]).unwrap()
    })
}

fn conv2d(trial: u64) -> Check {
    let mut r = rng(500 + trial);
    let stride = 1 + (trial % 2) as usize;
    let pad = ((trial / 2) % 2) as usize;
    let x = rand_tensor(&[2, 2, 5, 5], &mut r);
    let k = rand_tensor(&[3, 2, 3, 3], &mut r);
    let b = rand_tensor(&[3], &mut r);
    check_inputs(&[x, k, b], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
        weighted_sum(t, y, trial)
    })
}

fn conv_transpose2d(trial: u64) -> Check {
    let mut r = rng(600 + trial);
    let x = rand_tensor(&[2, 2, 3, 3], &mut r);
    let k = rand_tensor(&[2, 3, 2, 2], &mut r);
    let b = rand_tensor(&[3], &mut r);
    check_inputs(&[x, k, b], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], v[2], 2).unwrap();
        weighted_sum(t, y, trial)
    })
}

fn maxpool2d(trial: u64) -> Check {
    let x = rand_tensor(&[1, 2, 4, 6], &mut rng(700 + trial));
    check_inputs(&[x], |t, v| {
        let y = t.maxpool2d(v[0]).unwrap();
        weighted_sum(t, y, trial)
    })
}

fn upsample(trial: u64) -> Check {
    let x = rand_tensor(&[1, 2, 3, 4], &mut rng(800 + trial));
    check_inputs(&[x], |t, v| {
        let y = t.upsample_nearest2x(v[0]).unwrap();
        weighted_sum(t, y, trial)
    })
}

fn dense(trial: u64) -> Check {
    let mut r = rng(900 + trial);
    let x = rand_tensor(&[4, 6], &mut r);
    let w = rand_tensor(&[6, 3], &mut r);
    let b = rand_tensor(&[3], &mut r);
    check_inputs(&[x, w, b], |t, v| {
        let y = t.dense(v[0], v[1], v[2]).unwrap();
        weighted_sum(t, y, trial)
    })
}

fn gather(trial: u64) -> Check {
    let mut r = rng(1000 + trial);
    let x = rand_tensor(&[2, 4, 5], &mut r);
    let mut taps = Taps::new();
    for c in 0..2 {
        for _ in 0..6 {
            let (y, xx) = (r.gen_range(0.0..3.0), r.gen_range(0.0..4.0));
            for (i, w) in bilinear_taps(4, 5, y, xx).unwrap() {
                taps.push(c * 20 + i, w);
            }
            taps.finish_row();
        }
    }
    check_inputs(&[x], move |t, v| {
        let y = t.gather(v[0], taps.clone(), &[2, 6]).unwrap();
        weighted_sum(t, y, trial)
    })
}

fn concat(trial: u64) -> Check {
    let mut r = rng(1100 + trial);
    let (a, b) = (rand_tensor(&[1, 2, 3], &mut r), rand_tensor(&[2, 2, 3], &mut r));
    check_inputs(&[a, b], |t, v| {
        let y = t.concat(&[v[0], v[1], v[0]]).unwrap();
        weighted_sum(t, y, trial)
    })
}

fn smooth_l1(trial: u64) -> Check {
    let mut r = rng(1200 + trial);
    let p = Tensor::uniform(&[8], -3.0, 3.0, &mut r);
    let target: Vec<f64> = (0..8).map(|_| r.gen_range(-3.0..3.0)).collect();
    check_inputs(&[p], |t, v| t.smooth_l1_sum(v[0], &target).unwrap())
}

fn bce(trial: u64) -> Check {
    let mut r = rng(1300 + trial);
    let p = Tensor::uniform(&[8], -4.0, 4.0, &mut r);
    let target: Vec<f64> = (0..8).map(|_| r.gen_range(0.0..1.0)).collect();
    check_inputs(&[p], |t, v| t.bce_with_logits_mean(v[0], &target).unwrap())
}

fn cross_entropy(trial: u64) -> Check {
    let mut r = rng(1400 + trial);
    let p = Tensor::uniform(&[4, 2], -3.0, 3.0, &mut r);
    let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..2)).collect();
    check_inputs(&[p], |t, v| t.softmax_cross_entropy_mean(v[0], &labels).unwrap())
}

fn backbone_fpn(trial: u64) -> Check {
    let cfg = tiny_config();
    let mut r = rng(1500 + trial);
    let mut store = ParamStore::new();
    init_backbone(&cfg.backbone, &mut store, &mut r);
    init_fpn(&cfg.backbone, &cfg.fpn, &mut store, &mut r);
    jitter(&mut store, 0.1, &mut r);
    store.insert("input", rand_tensor(&[1, 3, 32, 32], &mut r));
    check_store(
        &store,
        |t, p| {
            let stages = backbone_forward(t, p, &cfg.backbone, p.get("input")).unwrap();
            let pyr = fpn_forward(t, p, &cfg.fpn, &stages).unwrap();
            let terms: Vec<_> = pyr
                .levels
                .iter()
                .enumerate()
                .map(|(i, &(_, v))| weighted_sum(t, v, trial * 8 + i as u64))
                .collect();
            t.add_all(&terms).unwrap()
        },
        Some(4),
        trial,
    )
}

const STRIDES: [usize; 4] = [4, 8, 16, 32];

fn pyramid_store(store: &mut ParamStore, channels: usize, size: usize, r: &mut impl Rng) {
    for s in STRIDES {
        store.insert(format!("map.s{s:02}"), rand_tensor(&[1, channels, size / s, size / s], r));
    }
}

fn pyramid(p: &irisseg_tensor::Bound) -> FeaturePyramid {
    FeaturePyramid {
        levels: STRIDES.iter().map(|&s| (s, p.get(&format!("map.s{s:02}")))).collect(),
    }
}

fn random_box(size: f64, r: &mut impl Rng) -> Box {
    let w = r.gen_range(4.0..size * 0.9);
    let h = r.gen_range(4.0..size * 0.9);
    let x = r.gen_range(0.0..size - w - 1.0);
    let y = r.gen_range(0.0..size - h - 1.0);
    Box::new(x, y, x + w, y + h).unwrap()
}

fn roi_pooling(trial: u64) -> Check {
    let mut r = rng(1600 + trial);
    let mut store = ParamStore::new();
    pyramid_store(&mut store, 2, 64, &mut r);
    let boxes: Vec<Box> = (0..3).map(|_| random_box(64.0, &mut r)).collect();
    check_store(
        &store,
        |t, p| {
            let y = pool_rois(t, &pyramid(p), &boxes).unwrap();
            weighted_sum(t, y, trial)
        },
        None,
        trial,
    )
}

fn rpn(trial: u64) -> Check {
    let mut r = rng(1700 + trial);
    let mut store = ParamStore::new();
    init_rpn(3, &mut store, &mut r);
    pyramid_store(&mut store, 3, 32, &mut r);
    check_store(
        &store,
        |t, p| {
            let out = rpn_head(t, p, &pyramid(p), &[8, 16]).unwrap();
            let a = weighted_sum(t, out.logits, trial);
            let b = weighted_sum(t, out.deltas, trial + 1);
            t.add(a, b).unwrap()
        },
        None,
        trial,
    )
}

/// Moves every parameter off its initial value. Zero biases on dead ReLU
/// inputs would otherwise leave pre-activations exactly at the kink.
fn jitter(store: &mut ParamStore, amount: f64, r: &mut impl Rng) {
    for (_, t) in store.iter_mut() {
        let noise = Tensor::uniform(t.shape(), -amount, amount, r);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

fn head_store(trial: u64) -> ParamStore {
    let cfg = tiny_config();
    let mut r = rng(1800 + trial);
    let mut store = ParamStore::new();
    init_heads(cfg.fpn.channels, &cfg.head, &mut store, &mut r);
    jitter(&mut store, 0.3, &mut r);
    store.insert("pooled", rand_tensor(&[2, cfg.fpn.channels, POOL_SIZE, POOL_SIZE], &mut r));
    store
}

fn box_class(trial: u64) -> Check {
    let store = head_store(trial);
    check_store(
        &store,
        |t, p| {
            let (cls, deltas) = box_class_head(t, p, p.get("pooled")).unwrap();
            let a = weighted_sum(t, cls, trial);
            let b = weighted_sum(t, deltas, trial + 1);
            t.add(a, b).unwrap()
        },
        Some(12),
        trial,
    )
}

fn mask(trial: u64) -> Check {
    let store = head_store(trial);
    check_store(
        &store,
        |t, p| {
            let m = mask_head(t, p, p.get("pooled")).unwrap();
            weighted_sum(t, m, trial)
        },
        Some(12),
        trial,
    )
}

/// An elliptical iris mask plus a random image, 64x64.
pub fn scene(seed: u64) -> (RgbImage, Mask) {
    let mut r = rng(seed);
    let (cx, cy) = (r.gen_range(24.0..40.0), r.gen_range(24.0..40.0));
    let (rx, ry) = (r.gen_range(8.0..18.0), r.gen_range(8.0..18.0));
    let mut mask = Mask::empty(64, 64);
    let mut img = RgbImage::filled(64, 64, [0, 0, 0]);
    for y in 0..64 {
        for x in 0..64 {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            let inside = dx * dx + dy * dy <= 1.0;
            mask.set(x, y, inside);
            let base: u8 = if inside { 70 } else { 180 };
            img.set_pixel(x, y, [base.wrapping_add(r.gen_range(0..30)), base, base.wrapping_add(r.gen_range(0..30))]);
        }
    }
    (img, mask)
}

/// The composed training loss of the tiny detector, with the sampled
/// anchors and ROIs frozen so the loss is a smooth function of the weights.
fn total_loss(trial: u64) -> Check {
    let mut model = Model::new(tiny_config(), 1900 + trial).map_err(|e| e.to_string())?;
    jitter(&mut model.params, 0.1, &mut rng(2100 + trial));
    let (img, m) = scene(2000 + trial);
    let gt = GroundTruth {
        bbox: derive_bbox_from_mask(&m).map_err(|e| e.to_string())?,
        mask: &m,
    };
    let input = image_tensor(&img);
    let mut r = rng(trial);
    let mut tape = irisseg_tensor::Tape::new();
    let p = model.params.bind(&mut tape, |_| false);
    let (_, plan) = model.loss(&mut tape, &p, &input, gt, None, &mut r).map_err(|e| e.to_string())?;
    check_store(
        &model.params,
        |t, p| {
            let (terms, _) = model.loss(t, p, &input, gt, Some(&plan), &mut rng(0)).unwrap();
            terms.total
        },
        Some(3),
        trial,
    )
}
