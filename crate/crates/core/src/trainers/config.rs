use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Scratch,
    Mt,
    Fixmatch,
    Cps,
    Reco,
    Stpp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Scratch,
        Algorithm::Mt,
        Algorithm::Fixmatch,
        Algorithm::Cps,
        Algorithm::Reco,
        Algorithm::Stpp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Scratch => "scratch",
            Algorithm::Mt => "mt",
            Algorithm::Fixmatch => "fixmatch",
            Algorithm::Cps => "cps",
            Algorithm::Reco => "reco",
            Algorithm::Stpp => "stpp",
        }
    }

    /// Display name used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Scratch => "Scratch",
            Algorithm::Mt => "MT",
            Algorithm::Fixmatch => "FixMatch",
            Algorithm::Cps => "CPS",
            Algorithm::Reco => "ReCo",
            Algorithm::Stpp => "ST++",
        }
    }

    pub fn is_semi_supervised(self) -> bool {
        self != Algorithm::Scratch
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s || (s == "st++" && *a == Algorithm::Stpp))
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Labeled examples per iteration.
    pub batch_size: usize,
    /// Unlabeled examples per iteration.
    pub unlabeled_batch_size: usize,
    pub weight_decay: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_epochs: usize,
    pub algorithm: Algorithm,
    pub ema_decay: f64,
    pub conf_threshold: f64,
    pub reco_easy: f64,
    pub reco_hard: f64,
    pub unsup_weight: f64,
    pub contrast_weight: f64,
    pub contrast_temp: f64,
    pub queries_per_class: usize,
    /// Fraction of unlabeled records ST++ admits in its second phase.
    pub stpp_select_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            unlabeled_batch_size: 16,
            weight_decay: 0.05,
            lr_peak: 0.001,
            lr_final: 0.0001,
            warmup_epochs: 10,
            algorithm: Algorithm::Scratch,
            ema_decay: 0.99,
            conf_threshold: 0.8,
            reco_easy: 0.65,
            reco_hard: 0.8,
            unsup_weight: 1.0,
            contrast_weight: 0.1,
            contrast_temp: 0.5,
            queries_per_class: 256,
            stpp_select_frac: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.unlabeled_batch_size == 0 {
            return err("epochs and batch sizes must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return err(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(0.0 < self.reco_easy && self.reco_easy < self.reco_hard && self.reco_hard <= 1.0) {
            return err(format!(
                "ReCo thresholds must satisfy 0 < easy ({}) < hard ({}) <= 1",
                self.reco_easy, self.reco_hard
            ));
        }
        if !(0.0 < self.conf_threshold && self.conf_threshold <= 1.0) {
            return err(format!("conf_threshold = {} must lie in (0, 1]", self.conf_threshold));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return err(format!("ema_decay = {} must lie in [0, 1]", self.ema_decay));
        }
        if self.lr_peak < 0.0 || self.lr_final < 0.0 || self.weight_decay < 0.0 {
            return err("learning rates and weight decay must be non-negative".into());
        }
        if self.unsup_weight < 0.0 || self.contrast_weight < 0.0 || !(self.contrast_temp > 0.0) {
            return err("loss weights must be non-negative and contrast_temp positive".into());
        }
        if !(0.0 < self.stpp_select_frac && self.stpp_select_frac <= 1.0) {
            return err(format!("stpp_select_frac = {} must lie in (0, 1]", self.stpp_select_frac));
        }
        Ok(())
    }
}

/// Learning rate at a global step: linear warmup from 0 to `lr_peak`, then
/// cosine annealing that reaches `lr_final` on the last step.
pub fn lr_at(step: usize, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_epochs * steps_per_epoch;
    let total = config.epochs * steps_per_epoch;
    if step < warmup {
        return config.lr_peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup + 1).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    config.lr_final + (config.lr_peak - config.lr_final) * (1.0 + (PI * progress).cos()) / 2.0
}

/// Weight of the unsupervised term, ramped linearly over the warmup epochs.
pub fn ramp_weight(step: usize, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_epochs * steps_per_epoch;
    if warmup == 0 {
        return config.unsup_weight;
    }
    config.unsup_weight * (step as f64 / warmup as f64).min(1.0)
}
