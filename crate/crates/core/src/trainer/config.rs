//! Training configuration and its flat `key = value` text form.
//!
//! Unknown keys are rejected by name. [`TrainConfig::echo`] writes every key
//! in a fixed order so two equal configs always echo byte-identically.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DrnaError, Result};
use crate::geometry::PyramidLevel;
use crate::net::model::ArchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Navigator, teacher, augmentor and scrutinizer trained jointly.
    Drna,
    /// Backbone plus the shared classifier on the full image only.
    Baseline,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Drna => "drna",
            Method::Baseline => "baseline",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "drna" => Ok(Method::Drna),
            "baseline" => Ok(Method::Baseline),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub top_m: usize,
    pub top_k: usize,
    pub theta_crop: f64,
    pub theta_drop: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub initial_lr: f64,
    /// Zero-based epoch from which `lr_after_drop` applies.
    pub lr_drop_epoch: usize,
    pub lr_after_drop: f64,
    pub epochs: usize,
    pub seed: u64,
    pub nms_iou_threshold: f64,
    pub drop_probability: f64,
    pub grad_clip_norm: f64,
    pub input_size: usize,
    pub backbone_widths: Vec<usize>,
    pub navigator_width: usize,
    pub pyramid_strides: Vec<usize>,
    pub pyramid_base_sizes: Vec<f64>,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Drna,
            top_m: 4,
            top_k: 2,
            theta_crop: 0.5,
            theta_drop: 0.5,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 1e-4,
            initial_lr: 1e-3,
            lr_drop_epoch: 20,
            lr_after_drop: 1e-4,
            epochs: 100,
            seed: 0,
            nms_iou_threshold: 0.25,
            drop_probability: 0.5,
            grad_clip_norm: 5.0,
            input_size: 64,
            backbone_widths: vec![32, 64, 128, 256],
            navigator_width: 64,
            pyramid_strides: vec![8, 16, 32],
            pyramid_base_sizes: vec![16.0, 32.0, 48.0],
            anchor_scales: vec![1.0, 1.26],
            anchor_ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DrnaError::config(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_scalar(key, v.trim())).collect()
}

impl TrainConfig {
    pub const KEYS: [&'static str; 26] = [
        "method",
        "top_m",
        "top_k",
        "theta_crop",
        "theta_drop",
        "alpha",
        "beta",
        "gamma",
        "batch_size",
        "momentum",
        "weight_decay",
        "initial_lr",
        "lr_drop_epoch",
        "lr_after_drop",
        "epochs",
        "seed",
        "nms_iou_threshold",
        "drop_probability",
        "grad_clip_norm",
        "input_size",
        "backbone_widths",
        "navigator_width",
        "pyramid_strides",
        "pyramid_base_sizes",
        "anchor_scales",
        "anchor_ratios",
    ];

    fn value_of(&self, key: &str) -> String {
        match key {
            "method" => self.method.name().to_string(),
            "top_m" => self.top_m.to_string(),
            "top_k" => self.top_k.to_string(),
            "theta_crop" => self.theta_crop.to_string(),
            "theta_drop" => self.theta_drop.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "gamma" => self.gamma.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "initial_lr" => self.initial_lr.to_string(),
            "lr_drop_epoch" => self.lr_drop_epoch.to_string(),
            "lr_after_drop" => self.lr_after_drop.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "nms_iou_threshold" => self.nms_iou_threshold.to_string(),
            "drop_probability" => self.drop_probability.to_string(),
            "grad_clip_norm" => self.grad_clip_norm.to_string(),
            "input_size" => self.input_size.to_string(),
            "backbone_widths" => join(&self.backbone_widths),
            "navigator_width" => self.navigator_width.to_string(),
            "pyramid_strides" => join(&self.pyramid_strides),
            "pyramid_base_sizes" => join(&self.pyramid_base_sizes),
            "anchor_scales" => join(&self.anchor_scales),
            "anchor_ratios" => join(&self.anchor_ratios),
            _ => unreachable!("unknown key {key}"),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "method" => self.method = v.parse().map_err(|e: String| DrnaError::config(format!("key `method`: {e}")))?,
            "top_m" => self.top_m = parse_scalar(key, v)?,
            "top_k" => self.top_k = parse_scalar(key, v)?,
            "theta_crop" => self.theta_crop = parse_scalar(key, v)?,
            "theta_drop" => self.theta_drop = parse_scalar(key, v)?,
            "alpha" => self.alpha = parse_scalar(key, v)?,
            "beta" => self.beta = parse_scalar(key, v)?,
            "gamma" => self.gamma = parse_scalar(key, v)?,
            "batch_size" => self.batch_size = parse_scalar(key, v)?,
            "momentum" => self.momentum = parse_scalar(key, v)?,
            "weight_decay" => self.weight_decay = parse_scalar(key, v)?,
            "initial_lr" => self.initial_lr = parse_scalar(key, v)?,
            "lr_drop_epoch" => self.lr_drop_epoch = parse_scalar(key, v)?,
            "lr_after_drop" => self.lr_after_drop = parse_scalar(key, v)?,
            "epochs" => self.epochs = parse_scalar(key, v)?,
            "seed" => self.seed = parse_scalar(key, v)?,
            "nms_iou_threshold" => self.nms_iou_threshold = parse_scalar(key, v)?,
            "drop_probability" => self.drop_probability = parse_scalar(key, v)?,
            "grad_clip_norm" => self.grad_clip_norm = parse_scalar(key, v)?,
            "input_size" => self.input_size = parse_scalar(key, v)?,
            "backbone_widths" => self.backbone_widths = parse_list(key, v)?,
            "navigator_width" => self.navigator_width = parse_scalar(key, v)?,
            "pyramid_strides" => self.pyramid_strides = parse_list(key, v)?,
            "pyramid_base_sizes" => self.pyramid_base_sizes = parse_list(key, v)?,
            "anchor_scales" => self.anchor_scales = parse_list(key, v)?,
            "anchor_ratios" => self.anchor_ratios = parse_list(key, v)?,
            other => return Err(DrnaError::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DrnaError::config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: &str| Err(DrnaError::config(format!("key `{key}`: {why}")));
        if self.top_m == 0 {
            return fail("top_m", "must be at least 1");
        }
        if self.top_k == 0 || self.top_k > self.top_m {
            return fail("top_k", "must satisfy 1 <= top_k <= top_m");
        }
        for (key, v) in [
            ("theta_crop", self.theta_crop),
            ("theta_drop", self.theta_drop),
            ("nms_iou_threshold", self.nms_iou_threshold),
            ("drop_probability", self.drop_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(key, "must lie in [0, 1]");
            }
        }
        for (key, v) in [
            ("initial_lr", self.initial_lr),
            ("lr_after_drop", self.lr_after_drop),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(key, "must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay", "must be non-negative");
        }
        for (key, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(key, "must be non-negative");
            }
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        if self.pyramid_strides.len() != self.pyramid_base_sizes.len() {
            return fail("pyramid_base_sizes", "needs one entry per pyramid stride");
        }
        self.arch(2).validate()
    }

    pub fn pyramid(&self) -> Vec<PyramidLevel> {
        self.pyramid_strides
            .iter()
            .zip(&self.pyramid_base_sizes)
            .map(|(&stride, &base_size)| PyramidLevel {
                stride,
                base_size,
                scales: self.anchor_scales.clone(),
                ratios: self.anchor_ratios.clone(),
            })
            .collect()
    }

    pub fn arch(&self, num_classes: usize) -> ArchConfig {
        ArchConfig {
            input_size: self.input_size,
            backbone_widths: self.backbone_widths.clone(),
            navigator_width: self.navigator_width,
            pyramid: self.pyramid(),
            num_classes,
            top_k: self.top_k,
        }
    }

    /// Keys that change the model or its evaluation-time behaviour.
    pub const MODEL_KEYS: [&'static str; 12] = [
        "method",
        "top_m",
        "top_k",
        "theta_crop",
        "nms_iou_threshold",
        "input_size",
        "backbone_widths",
        "navigator_width",
        "pyramid_strides",
        "pyramid_base_sizes",
        "anchor_scales",
        "anchor_ratios",
    ];

    /// First model key on which the two configs disagree.
    pub fn model_mismatch(&self, other: &TrainConfig) -> Option<&'static str> {
        Self::MODEL_KEYS
            .into_iter()
            .find(|k| self.value_of(k) != other.value_of(k))
    }

    /// Step schedule over zero-based epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.initial_lr
        } else {
            self.lr_after_drop
        }
    }
}
