//! The full detector: backbone, pyramid, proposals and ROI heads.

use irisseg_tensor::{kernels, Bound, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_forward, fpn_forward, init_backbone, init_fpn, BackboneConfig, FeaturePyramid, FpnConfig};
use crate::config::{self, Entry};
use crate::detection::heads::{init_heads, select_mask_channel, select_rows, IRIS};
use crate::detection::rpn::init_rpn;
use crate::detection::{
    assign_rpn_targets, box_class_head, generate_anchors, iou, mask_head, mask_target, pool_rois, rpn_head,
    sample_anchors, select_proposals, total_loss, Box, BoxDelta, Detection, HeadConfig, HeadOutput, LossTargets,
    LossTerms, RpnOutput, MASK_SIZE,
};
use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::pipeline::preprocess::image_tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fpn: FpnConfig,
    pub head: HeadConfig,
    /// `(stride, anchor size)` per proposal level.
    pub anchor_levels: Vec<(usize, f64)>,
    pub rpn_nms: f64,
    pub rpn_batch: usize,
    pub train_proposals: usize,
    pub test_proposals: usize,
    pub roi_positive_iou: f64,
    pub rois_per_image: usize,
    pub positive_fraction: f64,
    /// Multipliers applied to head regression targets.
    pub box_weights: [f64; 4],
    pub score_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            fpn: FpnConfig::default(),
            head: HeadConfig::default(),
            anchor_levels: vec![(8, 64.0), (16, 128.0), (32, 256.0)],
            rpn_nms: 0.7,
            rpn_batch: 32,
            train_proposals: 50,
            test_proposals: 20,
            roi_positive_iou: 0.7,
            rois_per_image: 8,
            positive_fraction: 0.5,
            box_weights: [10.0, 10.0, 5.0, 5.0],
            score_threshold: 0.5,
        }
    }
}

impl ModelConfig {
    /// Applies one entry; returns `false` for keys this config does not own.
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        let v = e.value.as_str();
        let k = e.key.as_str();
        match k {
            "stage_channels" => self.backbone.stage_channels = config::array(k, v)?,
            "blocks_per_stage" => self.backbone.blocks_per_stage = config::value(k, v)?,
            "skip_connections" => self.backbone.skip_connections = config::value(k, v)?,
            "fpn_channels" => self.fpn.channels = config::value(k, v)?,
            "top_down" => self.fpn.top_down = config::value(k, v)?,
            "fc_dim" => self.head.fc_dim = config::value(k, v)?,
            "mask_channels" => self.head.mask_channels = config::value(k, v)?,
            "anchor_strides" | "anchor_sizes" => {
                let n = self.anchor_levels.len();
                if k == "anchor_strides" {
                    let s: Vec<usize> = config::list(k, v)?;
                    self.anchor_levels = s
                        .iter()
                        .enumerate()
                        .map(|(i, &st)| (st, self.anchor_levels.get(i).map_or(0.0, |l| l.1)))
                        .collect();
                } else {
                    let s: Vec<f64> = config::list(k, v)?;
                    if s.len() != n {
                        return Err(Error::Config(format!("`anchor_sizes` needs {n} values")));
                    }
                    for (l, size) in self.anchor_levels.iter_mut().zip(s) {
                        l.1 = size;
                    }
                }
            }
            "rpn_nms" => self.rpn_nms = config::value(k, v)?,
            "rpn_batch" => self.rpn_batch = config::value(k, v)?,
            "train_proposals" => self.train_proposals = config::value(k, v)?,
            "test_proposals" => self.test_proposals = config::value(k, v)?,
            "roi_positive_iou" => self.roi_positive_iou = config::value(k, v)?,
            "rois_per_image" => self.rois_per_image = config::value(k, v)?,
            "positive_fraction" => self.positive_fraction = config::value(k, v)?,
            "box_weights" => self.box_weights = config::array(k, v)?,
            "score_threshold" => self.score_threshold = config::value(k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.backbone.stage_channels.contains(&0) || self.fpn.channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.head.fc_dim == 0 || self.head.mask_channels == 0 {
            return bad("head widths must be positive");
        }
        if self.anchor_levels.iter().any(|&(s, size)| !s.is_power_of_two() || !(4..=32).contains(&s) || !(size > 0.0)) {
            return bad("anchor strides must be 4, 8, 16 or 32 with positive sizes");
        }
        if self.rois_per_image == 0 || !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("rois_per_image must be positive and positive_fraction in [0,1]");
        }
        if self.test_proposals == 0 || self.train_proposals == 0 {
            return bad("proposal counts must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let strides: Vec<usize> = self.anchor_levels.iter().map(|l| l.0).collect();
        let sizes: Vec<f64> = self.anchor_levels.iter().map(|l| l.1).collect();
        [
            format!("stage_channels={}", config::join(&self.backbone.stage_channels)),
            format!("blocks_per_stage={}", self.backbone.blocks_per_stage),
            format!("skip_connections={}", self.backbone.skip_connections),
            format!("fpn_channels={}", self.fpn.channels),
            format!("top_down={}", self.fpn.top_down),
            format!("fc_dim={}", self.head.fc_dim),
            format!("mask_channels={}", self.head.mask_channels),
            format!("anchor_strides={}", config::join(&strides)),
            format!("anchor_sizes={}", config::join(&sizes)),
            format!("rpn_nms={}", self.rpn_nms),
            format!("rpn_batch={}", self.rpn_batch),
            format!("train_proposals={}", self.train_proposals),
            format!("test_proposals={}", self.test_proposals),
            format!("roi_positive_iou={}", self.roi_positive_iou),
            format!("rois_per_image={}", self.rois_per_image),
            format!("positive_fraction={}", self.positive_fraction),
            format!("box_weights={}", config::join(&self.box_weights)),
            format!("score_threshold={}", self.score_threshold),
        ]
        .iter()
        .map(|l| format!("{l}\n"))
        .collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for e in config::parse_entries(text)? {
            if !c.apply(&e)? {
                return Err(Error::Config(format!("line {}: unknown model key `{}`", e.line, e.key)));
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn strides(&self) -> Vec<usize> {
        self.anchor_levels.iter().map(|l| l.0).collect()
    }
}

/// Proposal sampling and targets for one training image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub rois: Vec<Box>,
    pub targets: LossTargets,
}

/// Ground truth of one training image.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth<'a> {
    pub bbox: Box,
    pub mask: &'a Mask,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_backbone(&config.backbone, &mut params, &mut rng);
        init_fpn(&config.backbone, &config.fpn, &mut params, &mut rng);
        init_rpn(config.fpn.channels, &mut params, &mut rng);
        init_heads(config.fpn.channels, &config.head, &mut params, &mut rng);
        Ok(Self { config, params })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for (_, t) in m.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn features(&self, tape: &mut Tape, p: &Bound, input: &Tensor) -> Result<FeaturePyramid> {
        let x = tape.constant(input.clone());
        let stages = backbone_forward(tape, p, &self.config.backbone, x)?;
        fpn_forward(tape, p, &self.config.fpn, &stages)
    }

    pub fn anchors(&self, height: usize, width: usize) -> Result<Vec<Box>> {
        generate_anchors(height, width, &self.config.anchor_levels)
    }

    /// Samples anchors and ROIs for one image from the current RPN output.
    pub fn plan(
        &self,
        tape: &Tape,
        rpn: &RpnOutput,
        anchors: &[Box],
        (width, height): (usize, usize),
        gt: GroundTruth<'_>,
        rng: &mut impl Rng,
    ) -> TrainPlan {
        let c = &self.config;
        let rpn_t = assign_rpn_targets(anchors, &gt.bbox);
        let rpn_samples = sample_anchors(&rpn_t.labels, c.rpn_batch, rng);
        let rpn_deltas = rpn_samples
            .iter()
            .filter(|s| s.1)
            .map(|s| rpn_t.deltas[s.0].to_array())
            .collect();

        let props = select_proposals(
            tape.value(rpn.logits).data(),
            tape.value(rpn.deltas).data(),
            anchors,
            (width as f64, height as f64),
            c.rpn_nms,
            c.train_proposals,
        );
        let mut candidates: Vec<Box> = props.iter().map(|p| p.bbox).collect();
        candidates.push(gt.bbox);
        let (mut pos, mut neg): (Vec<Box>, Vec<Box>) = candidates
            .into_iter()
            .partition(|b| iou(b, &gt.bbox) >= c.roi_positive_iou);
        pos.shuffle(rng);
        neg.shuffle(rng);
        let max_pos = ((c.rois_per_image as f64 * c.positive_fraction).floor() as usize).max(1);
        pos.truncate(max_pos);
        neg.truncate(c.rois_per_image.saturating_sub(pos.len()));

        let roi_deltas = pos
            .iter()
            .map(|b| BoxDelta::encode(&gt.bbox, b).scaled(c.box_weights).to_array())
            .collect();
        let mask_targets = pos.iter().flat_map(|b| mask_target(gt.mask, b, MASK_SIZE)).collect();
        let roi_labels = std::iter::repeat(IRIS)
            .take(pos.len())
            .chain(std::iter::repeat(0).take(neg.len()))
            .collect();
        let rois = pos.into_iter().chain(neg).collect();
        TrainPlan {
            rois,
            targets: LossTargets {
                rpn_samples,
                rpn_deltas,
                roi_labels,
                roi_deltas,
                mask_targets,
            },
        }
    }

    /// Records the training loss of one image. With `plan = None` proposals
    /// and targets are sampled from the current parameters; passing a plan
    /// replays it exactly.
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        input: &Tensor,
        gt: GroundTruth<'_>,
        plan: Option<&TrainPlan>,
        rng: &mut impl Rng,
    ) -> Result<(LossTerms, TrainPlan)> {
        let (h, w) = (input.shape()[2], input.shape()[3]);
        let pyramid = self.features(tape, p, input)?;
        let rpn = rpn_head(tape, p, &pyramid, &self.config.strides())?;
        let plan = match plan {
            Some(pl) => pl.clone(),
            None => {
                let anchors = self.anchors(h, w)?;
                self.plan(tape, &rpn, &anchors, (w, h), gt, rng)
            }
        };
        let pooled = pool_rois(tape, &pyramid, &plan.rois)?;
        let (class_logits, box_deltas) = box_class_head(tape, p, pooled)?;
        let pos = plan.targets.positive_rois();
        let mask_logits = if pos.is_empty() {
            None
        } else {
            let sel = select_rows(tape, pooled, &pos)?;
            Some(mask_head(tape, p, sel)?)
        };
        let head = HeadOutput {
            class_logits,
            box_deltas,
            mask_logits,
        };
        let terms = total_loss(tape, &rpn, &head, &plan.targets)?;
        Ok((terms, plan))
    }

    /// Highest-scoring iris detection, or `None` when the RPN proposes nothing.
    pub fn detect(&self, image: &RgbImage) -> Result<Option<Detection>> {
        let input = image_tensor(image);
        let (h, w) = (input.shape()[2], input.shape()[3]);
        let (iw, ih) = (image.width as f64, image.height as f64);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let pyramid = self.features(&mut tape, &p, &input)?;
        let anchors = self.anchors(h, w)?;
        let rpn = rpn_head(&mut tape, &p, &pyramid, &self.config.strides())?;
        let props = select_proposals(
            tape.value(rpn.logits).data(),
            tape.value(rpn.deltas).data(),
            &anchors,
            (iw, ih),
            self.config.rpn_nms,
            self.config.test_proposals,
        );
        if props.is_empty() {
            return Ok(None);
        }
        let boxes: Vec<Box> = props.iter().map(|p| p.bbox).collect();
        let pooled = pool_rois(&mut tape, &pyramid, &boxes)?;
        let (cls, deltas) = box_class_head(&mut tape, &p, pooled)?;
        let probs = kernels::softmax_rows(tape.value(cls).data(), 2);
        let deltas = tape.value(deltas).data();
        let mut best = 0;
        for i in 1..boxes.len() {
            if probs[2 * i + IRIS] > probs[2 * best + IRIS] {
                best = i;
            }
        }
        let wts = self.config.box_weights;
        let d = &deltas[8 * best + 4 * IRIS..8 * best + 4 * IRIS + 4];
        let delta = BoxDelta::from_slice(&[d[0] / wts[0], d[1] / wts[1], d[2] / wts[2], d[3] / wts[3]]);
        let refined = delta.decode(&boxes[best]).clip(iw, ih);
        let bbox = if refined.width() >= 1.0 && refined.height() >= 1.0 {
            refined
        } else {
            boxes[best]
        };
        let pooled = pool_rois(&mut tape, &pyramid, &[bbox])?;
        let m = mask_head(&mut tape, &p, pooled)?;
        let iris = select_mask_channel(&mut tape, m, IRIS)?;
        let mask_logits = tape.value(iris).reshape(&[MASK_SIZE, MASK_SIZE])?;
        let class_probs = [probs[2 * best], probs[2 * best + 1]];
        Ok(Some(Detection {
            bbox,
            class_probs,
            mask_logits,
            score: class_probs[IRIS],
        }))
    }

    /// Names of parameters in the given group.
    pub fn group_params(&self, group: &crate::pipeline::ParamGroup) -> Vec<String> {
        self.params.names().filter(|n| group.contains(n)).map(str::to_string).collect()
    }
}
