//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and malformed
//! values are errors naming the key. [`RunConfig::dump`] writes every key, and
//! parsing the dump reproduces the configuration exactly.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use frp_core::detector::InferenceMode;
use frp_core::experiment::ExperimentConfig;
use frp_core::{FrpError, Result};

pub const CONFIG_ENV: &str = "FRP_CONFIG";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Root of every random stream: scene generation, initialization, sampling.
    pub seed: u64,
    pub mode: InferenceMode,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            mode: InferenceMode::FULL,
            experiment: ExperimentConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| FrpError::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(FrpError::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.experiment;
        let t = &e.thresholds;
        let s = &e.scene;
        let c = &e.classifier;
        let d = &e.detector;
        let tr = &e.detector_train;
        let inf = &e.inference;
        vec![
            ("seed", self.seed.to_string()),
            ("mode", self.mode.name().to_string()),
            ("eps_iou", t.eps_iou.to_string()),
            ("eps_t", t.eps_t.to_string()),
            ("eps_c", t.eps_c.to_string()),
            ("eps", t.eps.to_string()),
            ("eps_s", t.eps_s.to_string()),
            ("scene.width", s.width.to_string()),
            ("scene.height", s.height.to_string()),
            ("scene.channels", s.channels.to_string()),
            ("scene.pedestrians_min", s.pedestrians.0.to_string()),
            ("scene.pedestrians_max", s.pedestrians.1.to_string()),
            ("scene.distractors_min", s.distractors.0.to_string()),
            ("scene.distractors_max", s.distractors.1.to_string()),
            ("scene.pedestrian_height_min", s.pedestrian_height.0.to_string()),
            ("scene.pedestrian_height_max", s.pedestrian_height.1.to_string()),
            ("scene.pedestrian_aspect", s.pedestrian_aspect.to_string()),
            ("scene.noise", s.noise.to_string()),
            ("data.train_images", e.train_images.to_string()),
            ("data.test_images", e.test_images.to_string()),
            ("data.negatives_per_image", e.negatives_per_image.to_string()),
            ("classifier.learning_rate", c.learning_rate.to_string()),
            ("classifier.epochs", c.epochs.to_string()),
            ("classifier.batch_size", c.batch_size.to_string()),
            ("classifier.max_shift", c.max_shift.to_string()),
            ("classifier.widths", join(&c.architecture.widths)),
            ("detector.backbone_widths", join(&d.backbone_widths)),
            ("detector.rpn_hidden", d.rpn_hidden.to_string()),
            ("detector.anchor_heights", join(&d.anchors.heights)),
            ("detector.anchor_aspect", d.anchors.aspect.to_string()),
            ("detector.roi_size", d.roi_size.to_string()),
            ("detector.head_hidden", d.head_hidden.to_string()),
            ("train.learning_rate", tr.learning_rate.to_string()),
            ("train.momentum", tr.momentum.to_string()),
            ("train.epochs", tr.epochs.to_string()),
            ("train.top_k", tr.train_top_k.to_string()),
            ("train.rpn_batch", tr.rpn_batch.to_string()),
            ("train.rpn_positive_iou", tr.rpn_positive_iou.to_string()),
            ("train.rpn_negative_iou", tr.rpn_negative_iou.to_string()),
            ("train.roi_batch", tr.roi_batch.to_string()),
            ("train.roi_positive_fraction", tr.roi_positive_fraction.to_string()),
            ("train.tfrp", tr.use_tfrp.to_string()),
            ("train.include_gt_proposals", tr.include_gt_proposals.to_string()),
            ("train.max_grad_norm", tr.max_grad_norm.to_string()),
            ("proposal.nms_iou", tr.proposal.nms_iou.to_string()),
            ("proposal.min_size", tr.proposal.min_size.to_string()),
            ("inference.top_k", inf.top_k.to_string()),
            ("inference.nms_iou", inf.nms_iou.to_string()),
            ("bench.seeds", join(&e.seeds)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let e = &mut self.experiment;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "eps_iou" => e.thresholds.eps_iou = parse(key, v)?,
            "eps_t" => e.thresholds.eps_t = parse(key, v)?,
            "eps_c" => e.thresholds.eps_c = parse(key, v)?,
            "eps" => e.thresholds.eps = parse(key, v)?,
            "eps_s" => e.thresholds.eps_s = parse(key, v)?,
            "scene.width" => e.scene.width = parse(key, v)?,
            "scene.height" => e.scene.height = parse(key, v)?,
            "scene.channels" => e.scene.channels = parse(key, v)?,
            "scene.pedestrians_min" => e.scene.pedestrians.0 = parse(key, v)?,
            "scene.pedestrians_max" => e.scene.pedestrians.1 = parse(key, v)?,
            "scene.distractors_min" => e.scene.distractors.0 = parse(key, v)?,
            "scene.distractors_max" => e.scene.distractors.1 = parse(key, v)?,
            "scene.pedestrian_height_min" => e.scene.pedestrian_height.0 = parse(key, v)?,
            "scene.pedestrian_height_max" => e.scene.pedestrian_height.1 = parse(key, v)?,
            "scene.pedestrian_aspect" => e.scene.pedestrian_aspect = parse(key, v)?,
            "scene.noise" => e.scene.noise = parse(key, v)?,
            "data.train_images" => e.train_images = parse(key, v)?,
            "data.test_images" => e.test_images = parse(key, v)?,
            "data.negatives_per_image" => e.negatives_per_image = parse(key, v)?,
            "classifier.learning_rate" => e.classifier.learning_rate = parse(key, v)?,
            "classifier.epochs" => e.classifier.epochs = parse(key, v)?,
            "classifier.batch_size" => e.classifier.batch_size = parse(key, v)?,
            "classifier.max_shift" => e.classifier.max_shift = parse(key, v)?,
            "classifier.widths" => e.classifier.architecture.widths = parse_list(key, v)?,
            "detector.backbone_widths" => e.detector.backbone_widths = parse_list(key, v)?,
            "detector.rpn_hidden" => e.detector.rpn_hidden = parse(key, v)?,
            "detector.anchor_heights" => e.detector.anchors.heights = parse_list(key, v)?,
            "detector.anchor_aspect" => e.detector.anchors.aspect = parse(key, v)?,
            "detector.roi_size" => e.detector.roi_size = parse(key, v)?,
            "detector.head_hidden" => e.detector.head_hidden = parse(key, v)?,
            "train.learning_rate" => e.detector_train.learning_rate = parse(key, v)?,
            "train.momentum" => e.detector_train.momentum = parse(key, v)?,
            "train.epochs" => e.detector_train.epochs = parse(key, v)?,
            "train.top_k" => e.detector_train.train_top_k = parse(key, v)?,
            "train.rpn_batch" => e.detector_train.rpn_batch = parse(key, v)?,
            "train.rpn_positive_iou" => e.detector_train.rpn_positive_iou = parse(key, v)?,
            "train.rpn_negative_iou" => e.detector_train.rpn_negative_iou = parse(key, v)?,
            "train.roi_batch" => e.detector_train.roi_batch = parse(key, v)?,
            "train.roi_positive_fraction" => e.detector_train.roi_positive_fraction = parse(key, v)?,
            "train.tfrp" => e.detector_train.use_tfrp = parse_bool(key, v)?,
            "train.include_gt_proposals" => e.detector_train.include_gt_proposals = parse_bool(key, v)?,
            "train.max_grad_norm" => e.detector_train.max_grad_norm = parse(key, v)?,
            "proposal.nms_iou" => {
                let x = parse(key, v)?;
                e.detector_train.proposal.nms_iou = x;
                e.inference.proposal.nms_iou = x;
            }
            "proposal.min_size" => {
                let x = parse(key, v)?;
                e.detector_train.proposal.min_size = x;
                e.inference.proposal.min_size = x;
            }
            "inference.top_k" => e.inference.top_k = parse(key, v)?,
            "inference.nms_iou" => e.inference.nms_iou = parse(key, v)?,
            "bench.seeds" => e.seeds = parse_list(key, v)?,
            other => return Err(FrpError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| FrpError::Parse {
                path: origin.to_string(),
                line: n + 1,
                message: format!("expected 'key = value', found '{line}'"),
            })?;
            self.set(key.trim(), value).map_err(|e| match e {
                FrpError::Config(m) => FrpError::Config(format!("{origin}:{}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| FrpError::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| FrpError::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn dump(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        e.thresholds.validate()?;
        e.scene.validate()?;
        e.detector_train.validate()?;
        if e.seeds.is_empty() {
            return Err(FrpError::Config("bench.seeds must list at least one seed".into()));
        }
        if e.inference.top_k == 0 {
            return Err(FrpError::Config("inference.top_k must be at least 1".into()));
        }
        if !(e.inference.nms_iou > 0.0 && e.inference.nms_iou <= 1.0) {
            return Err(FrpError::Config("inference.nms_iou must lie in (0, 1]".into()));
        }
        Ok(())
    }
}
