//! Brute-force references for the geometric and metric kernels. Every
//! suite checks `INSTANCES` random small cases: integer results must match
//! exactly and real ones to `REAL_TOL`.

use irisseg::detection::anchors::{assign_rpn_targets, AnchorLabel};
use irisseg::detection::{generate_anchors, iou, nms_indices, roi_align, Box};
use irisseg::image::Mask;
use irisseg::metrics::{aggregate, confusion, e1, f1, precision, recall, GroupBy, ImageScore};
use irisseg::pipeline::derive_bbox_from_mask;
use irisseg_tensor::Tensor;
use rand::Rng;

use super::rng;

pub const INSTANCES: u64 = 100;
pub const REAL_TOL: f64 = 1e-12;

pub type Oracle = (&'static str, fn(u64) -> Result<(), String>);

pub fn all() -> Vec<Oracle> {
    vec![
        ("iou vs rasterization", iou_raster),
        ("nms vs pairwise matrix", nms_matrix),
        ("roi align vs bilinear formula", roi_direct),
        ("confusion/f1/e1 vs pixel loop", metrics_loop),
        ("anchor counts", anchor_counts),
        ("bbox from mask vs projections", bbox_projection),
        ("rpn labels vs rule replay", rpn_rules),
        ("aggregate vs streaming moments", aggregate_streaming),
    ]
}

pub fn run(o: &Oracle) -> Result<u64, String> {
    for i in 0..INSTANCES {
        (o.1)(i).map_err(|e| format!("instance {i}: {e}"))?;
    }
    Ok(INSTANCES)
}

fn close(what: &str, a: f64, b: f64) -> Result<(), String> {
    if (a - b).abs() <= REAL_TOL {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs {b}"))
    }
}

fn int_box(r: &mut impl Rng, n: i32) -> Box {
    let x1 = r.gen_range(0..n - 1);
    let y1 = r.gen_range(0..n - 1);
    let x2 = r.gen_range(x1 + 1..=n);
    let y2 = r.gen_range(y1 + 1..=n);
    Box::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap()
}

fn covers(b: &Box, x: i32, y: i32) -> bool {
    (x as f64) >= b.x1 && (x as f64) < b.x2 && (y as f64) >= b.y1 && (y as f64) < b.y2
}

fn iou_raster(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (a, b) = (int_box(&mut r, 24), int_box(&mut r, 24));
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..24 {
        for x in 0..24 {
            let (ia, ib) = (covers(&a, x, y), covers(&b, x, y));
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    close("iou", iou(&a, &b), inter as f64 / union as f64)?;
    close("iou symmetric", iou(&a, &b), iou(&b, &a))
}

fn nms_matrix(seed: u64) -> Result<(), String> {
    let mut r = rng(1000 + seed);
    let n = r.gen_range(1..12);
    let boxes: Vec<Box> = (0..n).map(|_| int_box(&mut r, 16)).collect();
    // Coarse scores so ties occur.
    let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..5) as f64 / 4.0).collect();
    let thr = [0.3, 0.5, 0.7][seed as usize % 3];
    let m: Vec<Vec<f64>> = boxes.iter().map(|a| boxes.iter().map(|b| iou(a, b)).collect()).collect();
    // rank[i] < rank[j] when i is visited first.
    let before = |i: usize, j: usize| scores[i] > scores[j] || (scores[i] == scores[j] && i < j);
    let mut kept = vec![false; n];
    for _ in 0..n {
        for j in 0..n {
            kept[j] = (0..n).all(|i| !(before(i, j) && kept[i] && m[i][j] > thr));
        }
    }
    let mut expect: Vec<usize> = (0..n).filter(|&i| kept[i]).collect();
    expect.sort_by(|&a, &b| if before(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    let got = nms_indices(&boxes, &scores, thr);
    if got != expect {
        return Err(format!("nms kept {got:?}, oracle {expect:?}"));
    }
    Ok(())
}

fn bilinear(map: &Tensor, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (dy, dx) = (y - y0 as f64, x - x0 as f64);
    let v = |yy: usize, xx: usize| map.at(&[c, yy, xx]);
    v(y0, x0) * (1.0 - dy) * (1.0 - dx) + v(y0, x1) * (1.0 - dy) * dx + v(y1, x0) * dy * (1.0 - dx) + v(y1, x1) * dy * dx
}

fn roi_direct(seed: u64) -> Result<(), String> {
    let mut r = rng(2000 + seed);
    let stride = [1usize, 2, 4, 8][seed as usize % 4];
    let (c, h, w) = (2, r.gen_range(2..9), r.gen_range(2..9));
    let map = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut r);
    let (iw, ih) = ((w * stride) as f64, (h * stride) as f64);
    let x1 = r.gen_range(-2.0..iw - 1.0);
    let y1 = r.gen_range(-2.0..ih - 1.0);
    let b = Box::new(x1, y1, r.gen_range(x1 + 0.5..iw + 2.0), r.gen_range(y1 + 0.5..ih + 2.0)).unwrap();
    let out = [3usize, 7][seed as usize % 2];
    let got = roi_align(&map, &b, stride, out).map_err(|e| e.to_string())?;
    let s = stride as f64;
    let (bw, bh) = (b.width() / s / out as f64, b.height() / s / out as f64);
    for ch in 0..c {
        for i in 0..out {
            for j in 0..out {
                let mut acc = 0.0;
                for (fy, fx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    acc += bilinear(&map, ch, b.y1 / s + (i as f64 + fy) * bh, b.x1 / s + (j as f64 + fx) * bw);
                }
                close(&format!("bin ({ch},{i},{j})"), got.at(&[ch, i, j]), acc / 4.0)?;
            }
        }
    }
    Ok(())
}

fn random_mask(r: &mut impl Rng, w: usize, h: usize, density: f64) -> Mask {
    Mask::new(w, h, (0..w * h).map(|_| r.gen_bool(density)).collect()).unwrap()
}

fn metrics_loop(seed: u64) -> Result<(), String> {
    let mut r = rng(3000 + seed);
    let (w, h) = (r.gen_range(1..12), r.gen_range(1..12));
    // Include all-empty and all-full masks now and then.
    let dens = |r: &mut rand_chacha::ChaCha8Rng| [0.0, 1.0, 0.3, 0.6][r.gen_range(0..4)];
    let (dp, dg) = (dens(&mut r), dens(&mut r));
    let pred = random_mask(&mut r, w, h, dp);
    let gt = random_mask(&mut r, w, h, dg);
    let (mut tp, mut fp, mut fn_, mut tn, mut xor) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for y in 0..h {
        for x in 0..w {
            let (p, g) = (pred.get(x, y), gt.get(x, y));
            xor += (p ^ g) as u64;
            match (p as u8) * 2 + g as u8 {
                3 => tp += 1,
                2 => fp += 1,
                1 => fn_ += 1,
                _ => tn += 1,
            }
        }
    }
    let c = confusion(&pred, &gt).map_err(|e| e.to_string())?;
    if (c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fn_, tn) {
        return Err(format!("counts {c:?} vs ({tp},{fp},{fn_},{tn})"));
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let rc = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    close("precision", precision(&c), p)?;
    close("recall", recall(&c), rc)?;
    close("f1", f1(&c), f)?;
    close("e1", e1(&c), xor as f64 / (w * h) as f64)
}

fn anchor_counts(seed: u64) -> Result<(), String> {
    let mut r = rng(4000 + seed);
    let (h, w) = (32 * r.gen_range(1..7), 32 * r.gen_range(1..7));
    let all = [(4usize, 32.0), (8, 64.0), (16, 128.0), (32, 256.0)];
    let levels: Vec<(usize, f64)> = all.iter().copied().filter(|_| r.gen_bool(0.6)).collect();
    let anchors = generate_anchors(h, w, &levels).map_err(|e| e.to_string())?;
    let mut expect = 0;
    for &(s, size) in &levels {
        for y in (0..h).step_by(s) {
            for x in (0..w).step_by(s) {
                let b = &anchors[expect];
                let (cx, cy) = (x as f64 + s as f64 / 2.0, y as f64 + s as f64 / 2.0);
                if b.center() != (cx, cy) || b.width() != size || b.height() != size {
                    return Err(format!("anchor {expect} is {b:?}"));
                }
                expect += 1;
            }
        }
    }
    if anchors.len() != expect {
        return Err(format!("{} anchors, oracle {expect}", anchors.len()));
    }
    Ok(())
}

fn bbox_projection(seed: u64) -> Result<(), String> {
    let mut r = rng(5000 + seed);
    let (w, h) = (r.gen_range(1..20), r.gen_range(1..20));
    let mut m = Mask::empty(w, h);
    let blobs = r.gen_range(0..3);
    for _ in 0..blobs {
        let (x, y) = (r.gen_range(0..w), r.gen_range(0..h));
        let (bw, bh) = (r.gen_range(1..=w - x), r.gen_range(1..=h - y));
        for yy in y..y + bh {
            for xx in x..x + bw {
                m.set(xx, yy, true);
            }
        }
    }
    let cols: Vec<usize> = (0..w).filter(|&x| (0..h).any(|y| m.get(x, y))).collect();
    let rows: Vec<usize> = (0..h).filter(|&y| (0..w).any(|x| m.get(x, y))).collect();
    let got = derive_bbox_from_mask(&m);
    if cols.is_empty() {
        return match got {
            Err(irisseg::Error::EmptyMask) => Ok(()),
            other => Err(format!("empty mask gave {other:?}")),
        };
    }
    let b = got.map_err(|e| e.to_string())?;
    let x1 = cols[0].saturating_sub(2) as f64;
    let y1 = rows[0].saturating_sub(2) as f64;
    let mut x2 = (cols[cols.len() - 1] + 2).min(w - 1) as f64;
    let mut y2 = (rows[rows.len() - 1] + 2).min(h - 1) as f64;
    if x2 <= x1 {
        x2 = x1 + 1.0;
    }
    if y2 <= y1 {
        y2 = y1 + 1.0;
    }
    if (b.x1, b.y1, b.x2, b.y2) != (x1, y1, x2, y2) {
        return Err(format!("{b:?} vs ({x1},{y1},{x2},{y2})"));
    }
    Ok(())
}

fn rpn_rules(seed: u64) -> Result<(), String> {
    let mut r = rng(6000 + seed);
    let size = 32 * r.gen_range(1..4);
    let anchors = generate_anchors(size, size, &[(8, 16.0), (16, 32.0)]).map_err(|e| e.to_string())?;
    let gt = int_box(&mut r, size as i32);
    let t = assign_rpn_targets(&anchors, &gt);
    // Overlap by rasterizing at quarter-pixel resolution would be inexact for
    // anchors with half-pixel corners; the closed form is recomputed instead.
    let ov: Vec<f64> = anchors
        .iter()
        .map(|a| {
            let iw = (a.x2.min(gt.x2) - a.x1.max(gt.x1)).max(0.0);
            let ih = (a.y2.min(gt.y2) - a.y1.max(gt.y1)).max(0.0);
            let i = iw * ih;
            i / (a.width() * a.height() + gt.width() * gt.height() - i)
        })
        .collect();
    let best = ov.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first_best = ov.iter().position(|&v| v == best).unwrap();
    for (i, &v) in ov.iter().enumerate() {
        let expect = if v >= 0.7 || i == first_best {
            AnchorLabel::Positive
        } else if v <= 0.3 {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
        if t.labels[i] != expect {
            return Err(format!("anchor {i} (iou {v}) labelled {:?}, rule says {expect:?}", t.labels[i]));
        }
    }
    Ok(())
}

fn aggregate_streaming(seed: u64) -> Result<(), String> {
    let mut r = rng(7000 + seed);
    let n = r.gen_range(1..30);
    let scores: Vec<ImageScore> = (0..n)
        .map(|i| ImageScore {
            image: format!("img{i:03}"),
            subject_id: format!("s{}", r.gen_range(0..4)),
            dataset_tag: "d".into(),
            width: 8,
            height: 8,
            precision: r.gen(),
            recall: r.gen(),
            f1: r.gen(),
            e1: r.gen(),
        })
        .collect();
    let rep = aggregate(&scores, GroupBy::Subject).map_err(|e| e.to_string())?;
    for g in &rep.groups {
        // Welford's single-pass update.
        let (mut k, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for s in scores.iter().filter(|s| s.subject_id == g.key) {
            k += 1.0;
            let d = s.f1 - mean;
            mean += d / k;
            m2 += d * (s.f1 - mean);
        }
        if g.count as f64 != k {
            return Err(format!("group {} has {} members, oracle {k}", g.key, g.count));
        }
        close("mean", g.f1.mean, mean)?;
        close("variance", g.f1.variance, m2 / k)?;
    }
    Ok(())
}
