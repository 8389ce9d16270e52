//! Training schedule, head tuning, checkpoints and mask inference.

pub mod checkpoint;
pub mod infer;
pub mod preprocess;

use std::fmt;
use std::str::FromStr;

use irisseg_tensor::{Sgd, Tape};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;
pub use infer::{infer_mask, paste_mask, Inference};
pub use preprocess::{augment, derive_bbox_from_mask, grayscale_to_rgb, image_tensor, pad_reflect};

use crate::config::{self, Entry};
use crate::datasets::Sample;
use crate::detection::Box;
use crate::error::{Error, Result};
use crate::model::{GroundTruth, Model};

/// Selector for the parameters updated in a training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// RPN, class/box/mask heads and the pyramid convolutions.
    Heads,
    /// `Heads` plus backbone stages `k` and up.
    StagesFrom(usize),
    All,
    /// RPN and class/box/mask heads only.
    HeadsOnly,
}

impl ParamGroup {
    pub fn contains(&self, name: &str) -> bool {
        let head = ["rpn.", "head.", "mask."].iter().any(|p| name.starts_with(p));
        match *self {
            ParamGroup::HeadsOnly => head,
            ParamGroup::Heads => head || name.starts_with("fpn."),
            ParamGroup::All => true,
            ParamGroup::StagesFrom(k) => {
                head || name.starts_with("fpn.") || stage_of(name).is_some_and(|s| s >= k)
            }
        }
    }
}

fn stage_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("backbone.stage")?;
    rest.split('.').next()?.parse().ok()
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Heads => f.write_str("heads"),
            ParamGroup::StagesFrom(k) => write!(f, "{k}+"),
            ParamGroup::All => f.write_str("all"),
            ParamGroup::HeadsOnly => f.write_str("heads-only"),
        }
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads" => Ok(ParamGroup::Heads),
            "heads-only" => Ok(ParamGroup::HeadsOnly),
            "all" => Ok(ParamGroup::All),
            _ => match s.strip_suffix('+').and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if (1..=5).contains(&k) => Ok(ParamGroup::StagesFrom(k)),
                _ => Err(Error::Config(format!("unknown parameter group `{s}`"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs_per_stage: [usize; 3],
    pub batch_size: usize,
    pub flip_probability: f64,
    pub stage_schedule: [ParamGroup; 3],
    /// Gradient norm cap per step; 0 disables clipping.
    pub clip_norm: f64,
    /// Train against the whole image as the box instead of the mask box.
    pub perimeter_box: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs_per_stage: [2, 1, 1],
            batch_size: 1,
            flip_probability: 0.5,
            stage_schedule: [ParamGroup::Heads, ParamGroup::StagesFrom(4), ParamGroup::All],
            clip_norm: 0.0,
            perimeter_box: false,
        }
    }
}

impl TrainConfig {
    /// Applies one entry; returns `false` for keys this config does not own.
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        let (k, v) = (e.key.as_str(), e.value.as_str());
        match k {
            "seed" => self.seed = config::value(k, v)?,
            "learning_rate" => self.learning_rate = config::value(k, v)?,
            "momentum" => self.momentum = config::value(k, v)?,
            "epochs_per_stage" => self.epochs_per_stage = config::array(k, v)?,
            "batch_size" => self.batch_size = config::value(k, v)?,
            "flip_probability" => self.flip_probability = config::value(k, v)?,
            "stage_schedule" => {
                let g: Vec<ParamGroup> = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
                self.stage_schedule = g
                    .try_into()
                    .map_err(|_| Error::Config("`stage_schedule` needs 3 groups".into()))?;
            }
            "clip_norm" => self.clip_norm = config::value(k, v)?,
            "perimeter_box" => self.perimeter_box = config::value(k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip_probability must lie in [0,1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("need learning_rate > 0, momentum in [0,1), clip_norm >= 0".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let groups: Vec<String> = self.stage_schedule.iter().map(ToString::to_string).collect();
        [
            format!("seed={}", self.seed),
            format!("learning_rate={}", self.learning_rate),
            format!("momentum={}", self.momentum),
            format!("epochs_per_stage={}", config::join(&self.epochs_per_stage)),
            format!("batch_size={}", self.batch_size),
            format!("flip_probability={}", self.flip_probability),
            format!("stage_schedule={}", groups.join(",")),
            format!("clip_norm={}", self.clip_norm),
            format!("perimeter_box={}", self.perimeter_box),
        ]
        .iter()
        .map(|l| format!("{l}\n"))
        .collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for e in config::parse_entries(text)? {
            if !c.apply(&e)? {
                return Err(Error::Config(format!("line {}: unknown training key `{}`", e.line, e.key)));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn ground_truth_box(sample: &Sample, perimeter: bool) -> Result<Box> {
    if perimeter {
        if !sample.mask.data.iter().any(|&v| v) {
            return Err(Error::EmptyMask);
        }
        let (w, h) = (sample.mask.width as f64, sample.mask.height as f64);
        return Box::new(0.0, 0.0, w - 1.0, h - 1.0).or_else(|_| Box::new(0.0, 0.0, w, h));
    }
    derive_bbox_from_mask(&sample.mask)
}

fn check_samples(samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    for s in samples {
        if (s.image.width, s.image.height) != (s.mask.width, s.mask.height) {
            return Err(Error::Dimension(format!(
                "{}: image {}x{} vs mask {}x{}",
                s.subject_id, s.image.width, s.image.height, s.mask.width, s.mask.height
            )));
        }
        derive_bbox_from_mask(&s.mask)?;
    }
    Ok(())
}

/// One optimisation phase over `group` for `epochs` passes.
fn run_phase(
    model: &mut Model,
    samples: &[Sample],
    group: ParamGroup,
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    history: &mut Vec<f64>,
) -> Result<()> {
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            model.params.zero_grads();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let s = augment(&samples[i], cfg.flip_probability, rng);
                let gt = GroundTruth {
                    bbox: ground_truth_box(&s, cfg.perimeter_box)?,
                    mask: &s.mask,
                };
                let input = image_tensor(&s.image);
                let mut tape = Tape::new();
                let bound = model.params.bind(&mut tape, |n| group.contains(n));
                let (terms, _) = model.loss(&mut tape, &bound, &input, gt, None, rng)?;
                let value = tape.value(terms.total).item();
                if !value.is_finite() {
                    return Err(Error::Invalid(format!("non-finite loss at step {}", history.len())));
                }
                tape.backward(terms.total)?;
                model.params.accumulate_grads(&tape, &bound);
                batch_loss += value;
            }
            let mut scale = 1.0 / chunk.len() as f64;
            if cfg.clip_norm > 0.0 {
                let norm = model.params.grad_norm(|n| group.contains(n)) * scale;
                if norm > cfg.clip_norm {
                    scale *= cfg.clip_norm / norm;
                }
            }
            sgd.step(&mut model.params, |n| group.contains(n), scale);
            let mean = batch_loss / chunk.len() as f64;
            history.push(mean);
            epoch_loss += mean;
            debug!("step {} loss {mean:.5}", history.len());
        }
        info!(
            "group {group} epoch {}/{epochs}: mean loss {:.4}",
            epoch + 1,
            epoch_loss / order.chunks(cfg.batch_size).len() as f64
        );
    }
    model.params.zero_grads();
    Ok(())
}

/// Three-phase schedule over `cfg.stage_schedule`, recording the loss of
/// every optimisation step.
pub fn train(mut model: Model, samples: &[Sample], cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    check_samples(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    for (group, &epochs) in cfg.stage_schedule.iter().zip(&cfg.epochs_per_stage) {
        run_phase(&mut model, samples, *group, epochs, cfg, &mut rng, &mut history)?;
    }
    Ok(Checkpoint {
        model,
        history,
        train_config: cfg.clone(),
    })
}

/// Largest tuning set accepted by [`tune_heads`].
pub const MAX_TUNE_SAMPLES: usize = 100;

/// Retrains only the RPN and ROI heads; backbone and pyramid stay frozen.
/// The loss history of `checkpoint` is extended.
pub fn tune_heads(checkpoint: Checkpoint, samples: &[Sample], epochs: usize, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if samples.len() > MAX_TUNE_SAMPLES {
        return Err(Error::Invalid(format!(
            "tuning takes at most {MAX_TUNE_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let Checkpoint { mut model, mut history, .. } = checkpoint;
    if epochs > 0 {
        check_samples(samples)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        run_phase(&mut model, samples, ParamGroup::HeadsOnly, epochs, cfg, &mut rng, &mut history)?;
    }
    Ok(Checkpoint {
        model,
        history,
        train_config: cfg.clone(),
    })
}
