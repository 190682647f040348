use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{canonical_hash, layered};
use crate::augment::{AugmentPolicy, StrongOp, WeakOp};
use crate::dsp::PreprocessConfig;
use crate::error::{Error, Result};
use crate::eval::MiouClasses;
use crate::ingest::LabelRatio;
use crate::models::{Backbone, ModelConfig};
use crate::trainers::{Algorithm, TrainConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    InDomain,
    CrossDomain,
    AugAblation,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::InDomain => "in_domain",
            Protocol::CrossDomain => "cross_domain",
            Protocol::AugAblation => "aug_ablation",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Weak-augmentation arm of the ablation, trained with Scratch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeakVariant {
    None,
    Crop,
    Flip,
    CropFlip,
}

/// Strong-augmentation arm of the ablation, trained with FixMatch on top of
/// random resized cropping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrongVariant {
    Single(StrongOp),
    /// `n` of the four default strong ops per sample.
    RandAugment(usize),
}

impl WeakVariant {
    pub const ALL: [WeakVariant; 4] = [WeakVariant::None, WeakVariant::Crop, WeakVariant::Flip, WeakVariant::CropFlip];

    pub fn name(self) -> &'static str {
        match self {
            WeakVariant::None => "none",
            WeakVariant::Crop => "crop",
            WeakVariant::Flip => "flip",
            WeakVariant::CropFlip => "crop+flip",
        }
    }

    pub fn policy(self, base: &AugmentPolicy) -> AugmentPolicy {
        let crop = matches!(self, WeakVariant::Crop | WeakVariant::CropFlip);
        AugmentPolicy {
            weak_ops: if crop { vec![WeakOp::RandomResizedCrop] } else { Vec::new() },
            include_flip_in_weak: matches!(self, WeakVariant::Flip | WeakVariant::CropFlip),
            ..base.clone()
        }
    }
}

impl StrongVariant {
    pub fn all() -> Vec<StrongVariant> {
        let singles = [
            StrongOp::BaselineShift,
            StrongOp::PowerlineNoise,
            StrongOp::AmplitudeScale,
            StrongOp::SineNoise,
            StrongOp::WhiteNoise,
        ];
        let mut v: Vec<StrongVariant> = singles.into_iter().map(StrongVariant::Single).collect();
        v.extend((1..=4).map(StrongVariant::RandAugment));
        v
    }

    pub fn name(self) -> String {
        match self {
            StrongVariant::Single(op) => op.name().to_string(),
            StrongVariant::RandAugment(n) => format!("randaugment_{n}of4"),
        }
    }

    pub fn policy(self, base: &AugmentPolicy) -> AugmentPolicy {
        let default = AugmentPolicy::default();
        let (pool, rand_n) = match self {
            StrongVariant::Single(op) => (vec![op], 1),
            StrongVariant::RandAugment(n) => (default.strong_pool.clone(), n),
        };
        AugmentPolicy {
            weak_ops: vec![WeakOp::RandomResizedCrop],
            include_flip_in_weak: false,
            strong_pool: pool,
            rand_n,
            include_baseline_shift_in_strong: false,
            ..base.clone()
        }
    }
}

impl FromStr for WeakVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeakVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weak variant `{s}` (none, crop, flip, crop+flip)")))
    }
}

impl FromStr for StrongVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrongVariant::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<String> = StrongVariant::all().into_iter().map(StrongVariant::name).collect();
                Error::Config(format!("unknown strong variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub weak: Vec<String>,
    pub strong: Vec<String>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            weak: WeakVariant::ALL.iter().map(|v| v.name().to_string()).collect(),
            strong: StrongVariant::all().into_iter().map(StrongVariant::name).collect(),
        }
    }
}

impl AblationSpec {
    pub fn weak_variants(&self) -> Result<Vec<WeakVariant>> {
        self.weak.iter().map(|s| s.parse()).collect()
    }

    pub fn strong_variants(&self) -> Result<Vec<StrongVariant>> {
        self.strong.iter().map(|s| s.parse()).collect()
    }
}

/// One benchmark sweep. Relative paths resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub protocol: Protocol,
    /// Canonical dataset directories or manifest files.
    pub datasets: Vec<PathBuf>,
    pub unlabeled_dataset: Option<PathBuf>,
    /// Interval-only sets scored by MAE alone after cross-domain training.
    pub interval_only_datasets: Vec<PathBuf>,
    /// Empty means every training record is labeled.
    pub ratios: Vec<LabelRatio>,
    pub algorithms: Vec<Algorithm>,
    pub backbones: Vec<Backbone>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentPolicy,
    /// Architecture hyperparameters; `backbone` is set per sweep cell.
    pub model: ModelConfig,
    pub eval_classes: MiouClasses,
    pub ablation: AblationSpec,
    pub out_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            protocol: Protocol::InDomain,
            datasets: Vec::new(),
            unlabeled_dataset: None,
            interval_only_datasets: Vec::new(),
            ratios: LabelRatio::ALL.to_vec(),
            algorithms: Algorithm::ALL.to_vec(),
            backbones: Backbone::ALL.to_vec(),
            seeds: vec![0],
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            augment: AugmentPolicy::default(),
            model: ModelConfig::default(),
            eval_classes: MiouClasses::All,
            ablation: AblationSpec::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let spec: ExperimentSpec = layered(&ExperimentSpec::default(), path, overrides)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.datasets.is_empty() {
            return err("at least one dataset is required");
        }
        if self.seeds.is_empty() || self.backbones.is_empty() {
            return err("seeds and backbones must be non-empty");
        }
        match self.protocol {
            Protocol::InDomain => {
                if self.ratios.is_empty() {
                    return err("in_domain requires at least one label ratio");
                }
                if self.algorithms.is_empty() {
                    return err("in_domain requires at least one algorithm");
                }
            }
            Protocol::CrossDomain => {
                if self.unlabeled_dataset.is_none() {
                    return err("cross_domain requires unlabeled_dataset");
                }
                if self.algorithms.is_empty() {
                    return err("cross_domain requires at least one algorithm");
                }
            }
            Protocol::AugAblation => {
                self.ablation.weak_variants()?;
                self.ablation.strong_variants()?;
            }
        }
        self.train.validate()?;
        self.preprocess.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        if (self.augment.fs_hz - self.preprocess.target_fs_hz).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "augment.fs_hz ({}) must equal preprocess.target_fs_hz ({})",
                self.augment.fs_hz, self.preprocess.target_fs_hz
            )));
        }
        Ok(())
    }

    /// Deterministic identity of the whole sweep.
    pub fn hash(&self) -> Result<String> {
        canonical_hash(self)
    }
}
