//! Training configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::AnnotationMode;
use crate::losses::DistillStrategy;

/// Where training regions come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    /// `n`×`n` grid.
    #[default]
    Grid,
    /// Filled bounding boxes of the ground-truth masks.
    GtBox,
    /// Ground-truth masks.
    GtMask,
}

impl RegionSource {
    pub fn annotation_mode(self) -> Option<AnnotationMode> {
        match self {
            RegionSource::Grid => None,
            RegionSource::GtBox => Some(AnnotationMode::Box),
            RegionSource::GtMask => Some(AnnotationMode::Mask),
        }
    }

    pub fn needs_masks(self) -> bool {
        self != RegionSource::Grid
    }

    fn name(self) -> &'static str {
        match self {
            RegionSource::Grid => "grid",
            RegionSource::GtBox => "gt_box",
            RegionSource::GtMask => "gt_mask",
        }
    }
}

/// Source of the inter-image negatives of the point contrast.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterNegatives {
    /// Momentum point features of the other images in the batch.
    #[default]
    Batch,
    /// Intra-image negatives only.
    None,
}

/// Granularity of the region contrast.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointMode {
    /// Individual sampled points, with affinity distillation.
    #[default]
    Point,
    /// One mean-pooled vector per region; no distillation.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Grid size.
    pub n: usize,
    /// Regions sampled per view.
    #[serde(rename = "N")]
    pub num_masks: usize,
    /// Points sampled per region.
    #[serde(rename = "P")]
    pub points_per_region: usize,
    /// Point-map resolution.
    #[serde(rename = "R")]
    pub resolution: usize,
    pub tau: f64,
    pub tau_t: f64,
    pub tau_s: f64,
    pub alpha: f64,
    pub beta: f64,
    pub ema: f64,
    pub queue_capacity: usize,
    pub warmup_fraction: f64,
    pub strategy: DistillStrategy,
    pub region_source: RegionSource,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub dim: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub jitter: f64,
    pub inter_negatives: InterNegatives,
    pub point_mode: PointMode,
    pub checkpoint_every: usize,
    pub keep_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        TrainConfig {
            n: 4,
            num_masks: 16,
            points_per_region: 16,
            resolution: enc.resolution,
            tau: 0.2,
            tau_t: 0.07,
            tau_s: 0.1,
            alpha: 0.5,
            beta: 0.7,
            ema: 0.999,
            queue_capacity: 4096,
            warmup_fraction: 0.15,
            strategy: DistillStrategy::MomentumToCross,
            region_source: RegionSource::Grid,
            batch_size: 32,
            steps: 2000,
            lr: 0.03,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            input_size: enc.input_size,
            widths: enc.widths,
            hidden: enc.hidden,
            dim: enc.dim,
            scale_min: 0.2,
            scale_max: 1.0,
            jitter: 0.4,
            inter_negatives: InterNegatives::Batch,
            point_mode: PointMode::Point,
            checkpoint_every: 500,
            keep_fraction: 0.8,
        }
    }
}

/// Every accepted key with its help text, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("n", "grid size; regions are the cells of an n x n grid"),
    ("N", "regions (valid masks) sampled per view, with repetition"),
    ("P", "points sampled per region"),
    ("R", "side length of the up-sampled point-feature map"),
    ("tau", "temperature of the image-level and point-level contrast"),
    ("tau_t", "teacher temperature of affinity distillation"),
    ("tau_s", "student temperature of affinity distillation"),
    ("alpha", "balance of point contrast vs. affinity distillation"),
    ("beta", "balance of point-level vs. image-level loss"),
    ("ema", "momentum-encoder EMA coefficient"),
    ("queue_capacity", "size of the image-embedding memory queue"),
    (
        "warmup_fraction",
        "fraction of steps before distillation is switched on",
    ),
    ("strategy", "distillation strategy: 1, 2 or 3"),
    ("region_source", "grid | gt_box | gt_mask"),
    ("batch_size", "images per step"),
    ("steps", "optimisation steps"),
    ("lr", "base learning rate at batch 256 (scaled linearly by batch size)"),
    ("sgd_momentum", "SGD momentum"),
    ("weight_decay", "L2 weight decay"),
    ("seed", "random seed"),
    ("input_size", "side length of the square input views"),
    ("widths", "comma-separated channel widths of the stride-2 conv stages"),
    ("hidden", "hidden width of the projectors"),
    ("dim", "embedding dimension"),
    ("scale_min", "smallest crop area fraction"),
    ("scale_max", "largest crop area fraction"),
    ("jitter", "brightness/contrast jitter strength"),
    (
        "inter_negatives",
        "batch | none: negatives from other images in the point contrast",
    ),
    (
        "point_mode",
        "point | pooled: contrast points or mean-pooled region vectors",
    ),
    (
        "checkpoint_every",
        "steps between checkpoints (0 = only first and last)",
    ),
    ("keep_fraction", "fraction of the affinity map kept when scoring"),
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

/// Splits `key = value` lines. Blank lines and lines starting with `#` are
/// ignored.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line, format!("line {} is not `key = value`", lineno + 1)))?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "n" => self.n = parse_num(key, v)?,
            "N" => self.num_masks = parse_num(key, v)?,
            "P" => self.points_per_region = parse_num(key, v)?,
            "R" => self.resolution = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "tau_t" => self.tau_t = parse_num(key, v)?,
            "tau_s" => self.tau_s = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "ema" => self.ema = parse_num(key, v)?,
            "queue_capacity" => self.queue_capacity = parse_num(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse_num(key, v)?,
            "strategy" => {
                self.strategy = DistillStrategy::try_from(parse_num::<u8>(key, v)?)
                    .map_err(|e| Error::config(key, e.to_string()))?
            }
            "region_source" => {
                self.region_source = match v {
                    "grid" => RegionSource::Grid,
                    "gt_box" => RegionSource::GtBox,
                    "gt_mask" => RegionSource::GtMask,
                    _ => return Err(Error::config(key, format!("unknown region source `{v}`"))),
                }
            }
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "sgd_momentum" => self.sgd_momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "input_size" => self.input_size = parse_num(key, v)?,
            "widths" => self.widths = v.split(',').map(|w| parse_num(key, w.trim())).collect::<Result<_>>()?,
            "hidden" => self.hidden = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "scale_min" => self.scale_min = parse_num(key, v)?,
            "scale_max" => self.scale_max = parse_num(key, v)?,
            "jitter" => self.jitter = parse_num(key, v)?,
            "inter_negatives" => {
                self.inter_negatives = match v {
                    "batch" => InterNegatives::Batch,
                    "none" => InterNegatives::None,
                    _ => return Err(Error::config(key, format!("expected batch or none, got `{v}`"))),
                }
            }
            "point_mode" => {
                self.point_mode = match v {
                    "point" => PointMode::Point,
                    "pooled" => PointMode::Pooled,
                    _ => return Err(Error::config(key, format!("expected point or pooled, got `{v}`"))),
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "keep_fraction" => self.keep_fraction = parse_num(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "n" => self.n.to_string(),
            "N" => self.num_masks.to_string(),
            "P" => self.points_per_region.to_string(),
            "R" => self.resolution.to_string(),
            "tau" => self.tau.to_string(),
            "tau_t" => self.tau_t.to_string(),
            "tau_s" => self.tau_s.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "ema" => self.ema.to_string(),
            "queue_capacity" => self.queue_capacity.to_string(),
            "warmup_fraction" => self.warmup_fraction.to_string(),
            "strategy" => self.strategy.index().to_string(),
            "region_source" => self.region_source.name().to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "lr" => self.lr.to_string(),
            "sgd_momentum" => self.sgd_momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "seed" => self.seed.to_string(),
            "input_size" => self.input_size.to_string(),
            "widths" => self.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "hidden" => self.hidden.to_string(),
            "dim" => self.dim.to_string(),
            "scale_min" => self.scale_min.to_string(),
            "scale_max" => self.scale_max.to_string(),
            "jitter" => self.jitter.to_string(),
            "inter_negatives" => match self.inter_negatives {
                InterNegatives::Batch => "batch".into(),
                InterNegatives::None => "none".into(),
            },
            "point_mode" => match self.point_mode {
                PointMode::Point => "point".into(),
                PointMode::Pooled => "pooled".into(),
            },
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "keep_fraction" => self.keep_fraction.to_string(),
            _ => return Err(Error::config(key, "unknown key")),
        })
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_kv_lines(text)? {
            self.set(&key, &value)?;
        }
        self.validate()
    }

    pub fn from_kv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// `--help` text: every key with its default.
    pub fn help_table() -> String {
        let d = TrainConfig::default();
        let mut out = String::from("Config keys (key = value, one per line):\n");
        for (key, help) in KEYS {
            let _ = writeln!(out, "  {key:<18} {help} [default: {}]", d.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        };
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, format!("must lie in [0, 1], got {v}")))
            }
        };
        positive("tau", self.tau)?;
        positive("tau_t", self.tau_t)?;
        positive("tau_s", self.tau_s)?;
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        unit("ema", self.ema)?;
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(
                "warmup_fraction",
                format!("must lie in [0, 1), got {}", self.warmup_fraction),
            ));
        }
        for (key, v) in [
            ("n", self.n),
            ("N", self.num_masks),
            ("P", self.points_per_region),
            ("R", self.resolution),
            ("batch_size", self.batch_size),
            ("input_size", self.input_size),
            ("hidden", self.hidden),
            ("dim", self.dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::config(
                "scale_min",
                format!(
                    "need 0 < scale_min <= scale_max <= 1, got {} and {}",
                    self.scale_min, self.scale_max
                ),
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return Err(Error::config("jitter", "must lie in [0, 1)"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::config("keep_fraction", "must lie in (0, 1]"));
        }
        positive("lr", self.lr)?;
        unit("sgd_momentum", self.sgd_momentum)?;
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        self.encoder_config()
            .validate()
            .map_err(|e| Error::config("widths", e.to_string()))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_size: self.input_size,
            in_channels: 3,
            widths: self.widths.clone(),
            hidden: self.hidden,
            dim: self.dim,
            resolution: self.resolution,
        }
    }

    /// Effective learning rate at batch size `batch_size`.
    pub fn scaled_lr(&self) -> f64 {
        self.lr * self.batch_size as f64 / 256.0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
