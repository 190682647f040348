//! Semi-supervised ECG delineation: data ingestion, preprocessing,
//! augmentation, 1D segmentation networks, training algorithms, metrics and
//! experiment orchestration.

pub mod augment;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod ingest;
pub mod models;
pub mod rng;
pub mod synth;
pub mod trainers;

pub use augment::AugmentPolicy;
pub use dsp::{PreparedExample, PreprocessConfig};
pub use error::{Error, Result};
pub use eval::{MetricsReport, MetricsRow, WaveClass, WaveSpan};
pub use experiments::{ExperimentSpec, Protocol, RunManifest};
pub use ingest::{DelineationMask, EcgRecord, LabelRatio, LabeledExample, ReferenceIntervals, SplitManifest};
pub use models::{Backbone, ModelConfig, SegModel};
pub use synth::{CorpusSpec, SynthConfig};
pub use trainers::{Algorithm, TrainConfig};
