use std::fmt::Write as _;
use std::str::FromStr;

use crate::augment::StrongAugConfig;
use crate::detector::{DecodeConfig, DetectorConfig};
use crate::error::{config_err, Result};
use crate::metanet::{MetaNetConfig, MetaTrainConfig};
use crate::pseudo_labels::ThresholdConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Supervised,
    Dsl,
}

/// How teacher detections are split into pseudo-label regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filter {
    /// Background / ignorable / foreground with per-category thresholds.
    Adaptive,
    /// One hard threshold, no ignorable region.
    Single,
}

/// Every training hyperparameter, as a flat `key = value` table.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub total_iters: usize,
    pub burn_in_frac: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Milestones as fractions of `total_iters`, increasing.
    pub lr_milestones: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub alpha: f64,
    pub gamma_scale: f64,
    pub eps: f64,
    pub tau1: f64,
    pub tau: f64,
    pub beta: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub stats_momentum: f64,
    pub filter: Filter,
    pub single_threshold: f64,
    pub metanet: bool,
    pub d: f64,
    pub metanet_steps: usize,
    /// Patch-shuffle cut count; 0 disables it.
    pub j: usize,
    /// Downsampling ratio of the scale pair.
    pub r: usize,
    pub rla: bool,
    pub weak_flip: f64,
    pub jitter: f64,
    pub max_cutouts: usize,
    pub pseudo_score_thresh: f64,
    pub nms_iou: f64,
    pub seed: u64,
    pub model_seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dsl,
            total_iters: 3000,
            burn_in_frac: 0.2,
            labeled_batch: 2,
            unlabeled_batch: 2,
            lr: 0.01,
            lr_decay: 10.0,
            lr_milestones: vec![16.0 / 24.0, 22.0 / 24.0],
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 2.0,
            alpha: 3.0,
            gamma_scale: 1.0,
            eps: 0.99,
            tau1: 0.1,
            tau: 0.35,
            beta: 0.7,
            clamp_lo: 0.25,
            clamp_hi: 0.35,
            stats_momentum: 0.99,
            filter: Filter::Adaptive,
            single_threshold: 0.2,
            metanet: true,
            d: 0.6,
            metanet_steps: 300,
            j: 2,
            r: 2,
            rla: true,
            weak_flip: 0.5,
            jitter: 0.4,
            max_cutouts: 2,
            pseudo_score_thresh: 0.05,
            nms_iou: 0.6,
            seed: 0,
            model_seed: 0,
            checkpoint_every: 0,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(config_err(format!("bad value `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "total_iters",
        "burn_in_frac",
        "labeled_batch",
        "unlabeled_batch",
        "lr",
        "lr_decay",
        "lr_milestones",
        "momentum",
        "weight_decay",
        "grad_clip",
        "alpha",
        "gamma_scale",
        "eps",
        "tau1",
        "tau",
        "beta",
        "clamp_lo",
        "clamp_hi",
        "stats_momentum",
        "filter",
        "single_threshold",
        "metanet",
        "d",
        "metanet_steps",
        "j",
        "r",
        "rla",
        "weak_flip",
        "jitter",
        "max_cutouts",
        "pseudo_score_thresh",
        "nms_iou",
        "seed",
        "model_seed",
        "checkpoint_every",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => {
                self.mode = match value.trim() {
                    "supervised" => Mode::Supervised,
                    "dsl" => Mode::Dsl,
                    _ => return Err(config_err(format!("mode must be supervised or dsl, got `{value}`"))),
                }
            }
            "total_iters" => self.total_iters = parse(key, value)?,
            "burn_in_frac" => self.burn_in_frac = parse(key, value)?,
            "labeled_batch" => self.labeled_batch = parse(key, value)?,
            "unlabeled_batch" => self.unlabeled_batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "lr_milestones" => {
                self.lr_milestones = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "gamma_scale" => self.gamma_scale = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "tau1" => self.tau1 = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "clamp_lo" => self.clamp_lo = parse(key, value)?,
            "clamp_hi" => self.clamp_hi = parse(key, value)?,
            "stats_momentum" => self.stats_momentum = parse(key, value)?,
            "filter" => {
                self.filter = match value.trim() {
                    "adaptive" => Filter::Adaptive,
                    "single" => Filter::Single,
                    _ => return Err(config_err(format!("filter must be adaptive or single, got `{value}`"))),
                }
            }
            "single_threshold" => self.single_threshold = parse(key, value)?,
            "metanet" => self.metanet = parse_bool(key, value)?,
            "d" => self.d = parse(key, value)?,
            "metanet_steps" => self.metanet_steps = parse(key, value)?,
            "j" => self.j = parse(key, value)?,
            "r" => self.r = parse(key, value)?,
            "rla" => self.rla = parse_bool(key, value)?,
            "weak_flip" => self.weak_flip = parse(key, value)?,
            "jitter" => self.jitter = parse(key, value)?,
            "max_cutouts" => self.max_cutouts = parse(key, value)?,
            "pseudo_score_thresh" => self.pseudo_score_thresh = parse(key, value)?,
            "nms_iou" => self.nms_iou = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "model_seed" => self.model_seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(config_err(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        Ok(match key {
            "mode" => match self.mode {
                Mode::Supervised => "supervised".into(),
                Mode::Dsl => "dsl".into(),
            },
            "total_iters" => self.total_iters.to_string(),
            "burn_in_frac" => self.burn_in_frac.to_string(),
            "labeled_batch" => self.labeled_batch.to_string(),
            "unlabeled_batch" => self.unlabeled_batch.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "lr_milestones" => list(&self.lr_milestones),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "alpha" => self.alpha.to_string(),
            "gamma_scale" => self.gamma_scale.to_string(),
            "eps" => self.eps.to_string(),
            "tau1" => self.tau1.to_string(),
            "tau" => self.tau.to_string(),
            "beta" => self.beta.to_string(),
            "clamp_lo" => self.clamp_lo.to_string(),
            "clamp_hi" => self.clamp_hi.to_string(),
            "stats_momentum" => self.stats_momentum.to_string(),
            "filter" => match self.filter {
                Filter::Adaptive => "adaptive".into(),
                Filter::Single => "single".into(),
            },
            "single_threshold" => self.single_threshold.to_string(),
            "metanet" => self.metanet.to_string(),
            "d" => self.d.to_string(),
            "metanet_steps" => self.metanet_steps.to_string(),
            "j" => self.j.to_string(),
            "r" => self.r.to_string(),
            "rla" => self.rla.to_string(),
            "weak_flip" => self.weak_flip.to_string(),
            "jitter" => self.jitter.to_string(),
            "max_cutouts" => self.max_cutouts.to_string(),
            "pseudo_score_thresh" => self.pseudo_score_thresh.to_string(),
            "nms_iou" => self.nms_iou.to_string(),
            "seed" => self.seed.to_string(),
            "model_seed" => self.model_seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return Err(config_err(format!("unknown key `{key}`"))),
        })
    }

    /// One `key = value` line per field, in [`Self::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            writeln!(s, "{key} = {}", self.get(key).expect("listed key")).expect("string write");
        }
        s
    }

    /// Applies `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| config_err(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(config_err(format!("{name} {v} outside (0, 1)")))
            }
        };
        unit("single_threshold", self.single_threshold)?;
        unit("pseudo_score_thresh", self.pseudo_score_thresh)?;
        unit("nms_iou", self.nms_iou)?;
        unit("tau", self.tau)?;
        self.thresholds().validate()?;
        if !(-1.0..=1.0).contains(&self.d) {
            return Err(config_err(format!("d {} outside [-1, 1]", self.d)));
        }
        if !(0.0..=1.0).contains(&self.eps) {
            return Err(config_err(format!("eps {} outside [0, 1]", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.burn_in_frac) {
            return Err(config_err(format!("burn_in_frac {} outside [0, 1]", self.burn_in_frac)));
        }
        if !(0.0..=1.0).contains(&self.weak_flip) {
            return Err(config_err(format!("weak_flip {} outside [0, 1]", self.weak_flip)));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1])
            || self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m))
        {
            return Err(config_err("lr_milestones must be increasing fractions in [0, 1]"));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(config_err("lr and lr_decay must be positive"));
        }
        if self.alpha < 0.0 || self.gamma_scale < 0.0 {
            return Err(config_err("loss weights must be non-negative"));
        }
        if self.labeled_batch == 0 || (self.mode == Mode::Dsl && self.unlabeled_batch == 0) {
            return Err(config_err("batches must be non-empty"));
        }
        if self.r < 1 {
            return Err(config_err("r must be at least 1"));
        }
        Ok(())
    }

    pub fn burn_in_iters(&self) -> usize {
        match self.mode {
            Mode::Supervised => self.total_iters,
            Mode::Dsl => (self.total_iters as f64 * self.burn_in_frac).round() as usize,
        }
    }

    /// Step indices at which the rate drops by `lr_decay`.
    pub fn milestones(&self) -> Vec<usize> {
        self.lr_milestones
            .iter()
            .map(|f| (f * self.total_iters as f64).round() as usize)
            .collect()
    }

    pub fn thresholds(&self) -> ThresholdConfig {
        ThresholdConfig {
            tau1: self.tau1,
            tau: self.tau,
            beta: self.beta,
            clamp: (self.clamp_lo, self.clamp_hi),
            momentum: self.stats_momentum,
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            rla: self.rla,
            ..DetectorConfig::default()
        }
    }

    pub fn pseudo_decode(&self) -> DecodeConfig {
        DecodeConfig {
            score_thresh: self.pseudo_score_thresh,
            nms_iou: self.nms_iou,
            ..DecodeConfig::default()
        }
    }

    pub fn strong_aug(&self) -> StrongAugConfig {
        StrongAugConfig {
            jitter: self.jitter,
            max_cutouts: self.max_cutouts,
            ..StrongAugConfig::default()
        }
    }

    pub fn metanet_config(&self) -> MetaNetConfig {
        MetaNetConfig::default()
    }

    pub fn metanet_train(&self) -> MetaTrainConfig {
        MetaTrainConfig {
            steps: self.metanet_steps,
            seed: self.seed,
            ..MetaTrainConfig::default()
        }
    }
}

/// Piecewise-constant rate: `lr / lr_decay^k` after the k-th milestone.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestones().iter().filter(|&&m| step >= m).count();
    cfg.lr / cfg.lr_decay.powi(passed as i32)
}
