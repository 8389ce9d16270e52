//! Synthetic eye images with exact iris masks.
//!
//! Each sample is an annulus (iris) around a concentric disk (pupil), cut by
//! horizontal eyelid chords, drawn over a sclera/skin background with
//! per-subject iris texture and Gaussian pixel noise. The outer radius is
//! solved from a drawn target area fraction using the closed-form visible
//! area, so realized mask fractions track the preset's scale statistics.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};

/// One training or evaluation unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: Mask,
    pub subject_id: String,
    pub dataset_tag: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub tag: String,
    pub width: usize,
    pub height: usize,
    /// Mean visible-iris area as a fraction of the image.
    pub scale_mean: f64,
    pub scale_sd: f64,
    pub nir: bool,
    pub pupil_ratio_range: (f64, f64),
    pub occlusion_level: f64,
    pub noise_sd: f64,
    pub subjects: usize,
    pub images_per_subject: usize,
    /// Resolution of the dataset the preset imitates; metadata only.
    pub native_resolution: (usize, usize),
}

/// Named presets mirroring the scale and modality of the four datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    CasiaLike,
    IitdLike,
    NdLike,
    UbirisLike,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::CasiaLike, Preset::IitdLike, Preset::NdLike, Preset::UbirisLike];

    pub fn name(self) -> &'static str {
        match self {
            Preset::CasiaLike => "casia-like",
            Preset::IitdLike => "iitd-like",
            Preset::NdLike => "nd-like",
            Preset::UbirisLike => "ubiris-like",
        }
    }

    pub fn spec(self) -> SyntheticSpec {
        let base = SyntheticSpec {
            tag: self.name().to_string(),
            width: 160,
            height: 160,
            scale_mean: 0.0,
            scale_sd: 0.01,
            nir: true,
            pupil_ratio_range: (0.3, 0.5),
            occlusion_level: 0.2,
            noise_sd: 4.0,
            subjects: 50,
            images_per_subject: 5,
            native_resolution: (0, 0),
        };
        match self {
            Preset::CasiaLike => SyntheticSpec {
                scale_mean: 0.277,
                native_resolution: (320, 280),
                ..base
            },
            Preset::IitdLike => SyntheticSpec {
                scale_mean: 0.3068,
                occlusion_level: 0.15,
                native_resolution: (320, 240),
                ..base
            },
            Preset::NdLike => SyntheticSpec {
                scale_mean: 0.094,
                noise_sd: 5.0,
                native_resolution: (640, 480),
                ..base
            },
            Preset::UbirisLike => SyntheticSpec {
                scale_mean: 0.0698,
                scale_sd: 0.03,
                nir: false,
                pupil_ratio_range: (0.2, 0.45),
                occlusion_level: 0.5,
                noise_sd: 10.0,
                native_resolution: (400, 300),
                ..base
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

const SCALE_MIN: f64 = 0.01;
const SCALE_MAX: f64 = 0.6;
/// Upper eyelid covers at most this fraction of the iris diameter.
const MAX_TOP_LID: f64 = 0.45;
const MAX_BOTTOM_LID: f64 = 0.3;
const BORDER: f64 = 3.0;

/// Area of the part of a radius-`r` disk lying beyond a chord at signed
/// distance `d` from the centre.
fn cap_area(r: f64, d: f64) -> f64 {
    if d >= r {
        0.0
    } else if d <= -r {
        PI * r * r
    } else {
        r * r * (d / r).acos() - d * (r * r - d * d).sqrt()
    }
}

/// Visible annulus area for a unit outer radius, pupil ratio `rho`, and
/// lid chords at distances `d_top`, `d_bottom` (unit radii) from the centre.
pub fn visible_area_unit(rho: f64, d_top: f64, d_bottom: f64) -> f64 {
    let outer = PI - cap_area(1.0, d_top) - cap_area(1.0, d_bottom);
    let inner = PI * rho * rho - cap_area(rho, d_top) - cap_area(rho, d_bottom);
    outer - inner
}

impl SyntheticSpec {
    fn max_radius(&self) -> f64 {
        self.width.min(self.height) as f64 / 2.0 - BORDER
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec `{}`: {m}", self.tag)));
        if self.width < 32 || self.height < 32 {
            return bad(format!("image {}x{} too small", self.width, self.height));
        }
        if !(self.scale_mean > 0.0 && self.scale_mean < 1.0) {
            return bad(format!("scale_mean {} outside (0,1)", self.scale_mean));
        }
        if !(self.scale_sd >= 0.0) {
            return bad("scale_sd must be non-negative".into());
        }
        let (lo, hi) = self.pupil_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.9) {
            return bad(format!("pupil_ratio_range ({lo}, {hi}) invalid"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_level) {
            return bad("occlusion_level must lie in [0,1]".into());
        }
        if !(self.noise_sd >= 0.0) || self.subjects == 0 || self.images_per_subject == 0 {
            return bad("noise_sd, subjects and images_per_subject must be positive".into());
        }
        // Worst case: largest pupil and heaviest lids at the mean scale.
        let d_top = 1.0 - 2.0 * MAX_TOP_LID * self.occlusion_level;
        let d_bot = 1.0 - 2.0 * MAX_BOTTOM_LID * self.occlusion_level;
        let area = visible_area_unit(hi, d_top, d_bot);
        let r = (self.scale_mean * (self.width * self.height) as f64 / area).sqrt();
        if r > self.max_radius() {
            return bad(format!(
                "mean scale {} needs iris radius {r:.1} but only {:.1} fits",
                self.scale_mean,
                self.max_radius()
            ));
        }
        Ok(())
    }

    /// Parses `key=value` lines (blank lines and `#` comments allowed) on
    /// top of `base`. Unknown keys are rejected.
    pub fn parse_kv(text: &str, base: SyntheticSpec) -> Result<Self> {
        let mut s = base;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::Config(format!("line {}: `{k}` needs a number", i + 1)))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("line {}: `{k}` needs an integer", i + 1)))
            };
            match k {
                "tag" => s.tag = v.to_string(),
                "width" => s.width = int(v)?,
                "height" => s.height = int(v)?,
                "scale_mean" => s.scale_mean = num(v)?,
                "scale_sd" => s.scale_sd = num(v)?,
                "nir" => {
                    s.nir = v
                        .parse()
                        .map_err(|_| Error::Config(format!("line {}: `nir` needs true/false", i + 1)))?
                }
                "pupil_ratio_min" => s.pupil_ratio_range.0 = num(v)?,
                "pupil_ratio_max" => s.pupil_ratio_range.1 = num(v)?,
                "occlusion_level" => s.occlusion_level = num(v)?,
                "noise_sd" => s.noise_sd = num(v)?,
                "subjects" => s.subjects = int(v)?,
                "images_per_subject" => s.images_per_subject = int(v)?,
                other => return Err(Error::Config(format!("line {}: unknown key `{other}`", i + 1))),
            }
        }
        s.validate()?;
        Ok(s)
    }
}

/// SplitMix64 finaliser, used to derive independent sub-seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Subject {
    id: String,
    gray_level: f64,
    iris_rgb: [f64; 3],
    skin_rgb: [f64; 3],
    pupil_center: f64,
    waves: [(f64, f64, f64); 3],
}

const IRIS_COLOURS: [[f64; 3]; 4] = [
    [105.0, 68.0, 42.0],
    [128.0, 98.0, 52.0],
    [82.0, 108.0, 72.0],
    [86.0, 112.0, 148.0],
];

fn subject(spec: &SyntheticSpec, seed: u64, index: usize) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5EED_0000_0000 + index as u64));
    let (lo, hi) = spec.pupil_ratio_range;
    let colour = IRIS_COLOURS[rng.gen_range(0..IRIS_COLOURS.len())];
    let tint = rng.gen_range(0.85..1.15);
    let skin_gain = rng.gen_range(0.8..1.1);
    let mut waves = [(0.0, 0.0, 0.0); 3];
    for w in waves.iter_mut() {
        *w = (rng.gen_range(6.0..24.0f64).round(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(4.0..12.0));
    }
    Subject {
        id: format!("{}-s{index:03}", spec.tag),
        gray_level: rng.gen_range(85.0..125.0),
        iris_rgb: colour.map(|c| c * tint),
        skin_rgb: [205.0 * skin_gain, 160.0 * skin_gain, 135.0 * skin_gain],
        pupil_center: rng.gen_range(lo..=hi),
        waves,
    }
}

/// Geometry of one rendered eye, in pixels.
#[derive(Clone, Copy, Debug)]
struct Eye {
    cx: f64,
    cy: f64,
    radius: f64,
    pupil: f64,
    /// Distances from the centre to the upper and lower lid chords.
    d_top: f64,
    d_bottom: f64,
    eye_half_width: f64,
}

impl Eye {
    fn in_iris_annulus(&self, x: f64, y: f64) -> bool {
        let r2 = (x - self.cx).powi(2) + (y - self.cy).powi(2);
        r2 <= self.radius * self.radius && r2 > self.pupil * self.pupil
    }

    /// Lid line height at column `x`: flat across the iris, curving towards
    /// the eye corners outside it.
    fn lid_top(&self, x: f64) -> f64 {
        let off = ((x - self.cx).abs() - self.radius).max(0.0);
        self.cy - self.d_top + 0.9 * off * off / self.radius
    }

    fn lid_bottom(&self, x: f64) -> f64 {
        let off = ((x - self.cx).abs() - self.radius).max(0.0);
        self.cy + self.d_bottom - 0.6 * off * off / self.radius
    }

    fn open(&self, x: f64, y: f64) -> bool {
        (x - self.cx).abs() <= self.eye_half_width && y >= self.lid_top(x) && y <= self.lid_bottom(x)
    }

    fn visible_iris(&self, x: f64, y: f64) -> bool {
        self.in_iris_annulus(x, y) && self.open(x, y)
    }
}

fn truncated_normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean.clamp(SCALE_MIN, SCALE_MAX);
    }
    let normal = Normal::new(mean, sd).expect("finite sd");
    loop {
        let v = normal.sample(rng);
        if v > SCALE_MIN && v < SCALE_MAX {
            return v;
        }
    }
}

fn draw_eye(spec: &SyntheticSpec, subj: &Subject, rng: &mut impl Rng) -> Result<Eye> {
    let (lo, hi) = spec.pupil_ratio_range;
    let spread = (hi - lo) * 0.25;
    for _ in 0..200 {
        let scale = truncated_normal(rng, spec.scale_mean, spec.scale_sd);
        let rho = (subj.pupil_center + rng.gen_range(-spread..=spread)).clamp(lo, hi);
        let t_top = spec.occlusion_level * MAX_TOP_LID * rng.gen_range(0.2..1.0);
        let t_bot = spec.occlusion_level * MAX_BOTTOM_LID * rng.gen_range(0.0..1.0);
        let (d_top, d_bot) = (1.0 - 2.0 * t_top, 1.0 - 2.0 * t_bot);
        let area = visible_area_unit(rho, d_top, d_bot);
        let radius = (scale * (spec.width * spec.height) as f64 / area).sqrt();
        if radius > spec.max_radius() {
            continue;
        }
        let jx = spec.width as f64 / 2.0 - BORDER - radius;
        let jy = spec.height as f64 / 2.0 - BORDER - radius;
        let cx = spec.width as f64 / 2.0 + rng.gen_range(-jx..=jx) * 0.6;
        let cy = spec.height as f64 / 2.0 + rng.gen_range(-jy..=jy) * 0.6;
        return Ok(Eye {
            cx,
            cy,
            radius,
            pupil: rho * radius,
            d_top: d_top * radius,
            d_bottom: d_bot * radius,
            eye_half_width: radius * rng.gen_range(1.9..2.5),
        });
    }
    Err(Error::Config(format!("synthetic spec `{}`: iris does not fit", spec.tag)))
}

fn render(spec: &SyntheticSpec, subj: &Subject, eye: &Eye, rng: &mut impl Rng) -> (RgbImage, Mask) {
    let (w, h) = (spec.width, spec.height);
    let mut img = RgbImage::filled(w, h, [0, 0, 0]);
    let mut mask = Mask::empty(w, h);
    let illum = if spec.nir {
        rng.gen_range(0.95..1.05)
    } else {
        rng.gen_range(0.7..1.25)
    };
    let grad_dir = rng.gen_range(0.0..2.0 * PI);
    let grad_amp = if spec.nir { 0.05 } else { 0.2 };
    let noise = Normal::new(0.0, spec.noise_sd.max(1e-12)).unwrap();
    let glints: Vec<(f64, f64, f64)> = if spec.nir {
        // Ring-light reflection inside the pupil.
        vec![(eye.cx + eye.pupil * 0.2, eye.cy - eye.pupil * 0.2, (eye.pupil * 0.25).max(1.5))]
    } else {
        (0..rng.gen_range(1..=3))
            .map(|_| {
                let a = rng.gen_range(0.0..2.0 * PI);
                let r = rng.gen_range(0.0..eye.radius * 0.8);
                (eye.cx + r * a.cos(), eye.cy + r * a.sin(), rng.gen_range(1.5..eye.radius * 0.18 + 2.0))
            })
            .collect()
    };

    for py in 0..h {
        for px in 0..w {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let dx = x - eye.cx;
            let dy = y - eye.cy;
            let r = (dx * dx + dy * dy).sqrt();
            let open = eye.open(x, y);
            let shade = 1.0 + grad_amp * ((dx * grad_dir.cos() + dy * grad_dir.sin()) / w as f64);
            // Base appearance as a gray level and an RGB triple.
            let (g, rgb): (f64, [f64; 3]) = if open && r <= eye.pupil {
                (25.0, [28.0, 22.0, 22.0])
            } else if open && r <= eye.radius {
                let theta = dy.atan2(dx);
                let t: f64 = subj
                    .waves
                    .iter()
                    .map(|&(k, phase, amp)| amp * (k * theta + phase + 3.0 * r / eye.radius).sin())
                    .sum();
                let limbus = if r > 0.88 * eye.radius { -18.0 } else { 0.0 };
                let collarette = if r < eye.pupil * 1.35 { 10.0 } else { 0.0 };
                let v = t + limbus + collarette;
                (
                    subj.gray_level + v,
                    subj.iris_rgb.map(|c| c + 0.6 * v),
                )
            } else if open {
                (205.0, [228.0, 220.0, 214.0])
            } else {
                let lash = !spec.nir
                    && y < eye.lid_top(x)
                    && y > eye.lid_top(x) - eye.radius * 0.12
                    && dx.abs() < eye.eye_half_width
                    && ((x * 1.7).sin() > 0.3);
                if lash {
                    (60.0, [50.0, 38.0, 34.0])
                } else {
                    (165.0, subj.skin_rgb)
                }
            };
            let glint = glints.iter().any(|&(gx, gy, gr)| (x - gx).powi(2) + (y - gy).powi(2) <= gr * gr);
            let pixel = if spec.nir {
                let v = if glint { 245.0 } else { g * illum * shade + noise.sample(rng) };
                let b = v.round().clamp(0.0, 255.0) as u8;
                [b, b, b]
            } else {
                let mut out = [0u8; 3];
                for c in 0..3 {
                    let v = if glint { 250.0 } else { rgb[c] * illum * shade + noise.sample(rng) };
                    out[c] = v.round().clamp(0.0, 255.0) as u8;
                }
                out
            };
            img.set_pixel(px, py, pixel);
            mask.set(px, py, eye.visible_iris(x, y));
        }
    }
    (img, mask)
}

/// Generates `n` samples. Sample `i` depends only on `(spec, seed, i)`;
/// subjects cycle through `images_per_subject` consecutive indices.
pub fn gen_synthetic(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..n).map(|i| gen_one(spec, seed, i)).collect()
}

pub fn gen_one(spec: &SyntheticSpec, seed: u64, index: usize) -> Result<Sample> {
    let subj = subject(spec, seed, (index / spec.images_per_subject) % spec.subjects);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index as u64));
    let eye = draw_eye(spec, &subj, &mut rng)?;
    let (image, mask) = render(spec, &subj, &eye, &mut rng);
    Ok(Sample {
        image,
        mask,
        subject_id: subj.id,
        dataset_tag: spec.tag.clone(),
    })
}
