//! Shared fixtures for the criterion benches.

use candle_core::DType;
use ecgseg::models::{Backbone, ModelConfig, SegModel};
use ecgseg::synth::synth_record;
use ecgseg::trainers::{BatchPair, LabeledBatch, Learner, UnlabeledBatch};
use ecgseg::{LabeledExample, PreprocessConfig, SynthConfig, TrainConfig};

/// A 10 s synthetic record at `fs_hz`.
pub fn raw_record(fs_hz: f64, seed: u64) -> LabeledExample {
    synth_record(&SynthConfig {
        fs_hz,
        seed,
        ..SynthConfig::default()
    })
    .expect("default synth config is valid")
}

pub fn preprocess_config() -> PreprocessConfig {
    PreprocessConfig::default()
}

/// Prediction/truth pair differing by a one-sample shift.
pub fn mask_pair(seed: u64) -> (Vec<u8>, Vec<u8>) {
    let truth = raw_record(250.0, seed).mask.expect("synth records are labeled").into_labels();
    let mut pred = truth.clone();
    pred.rotate_right(1);
    (pred, truth)
}

pub fn window(seed: u64, len: usize) -> (Vec<f32>, Vec<u8>) {
    let ex = raw_record(250.0, seed);
    let mask = ex.mask.expect("synth records are labeled").into_labels();
    (ex.record.samples[..len].to_vec(), mask[..len].to_vec())
}

/// A tiny model with its optimizer and one labeled plus unlabeled batch.
pub fn train_fixture(backbone: Backbone, len: usize) -> (Learner, BatchPair) {
    let config = ModelConfig::tiny(backbone, 16);
    let model = SegModel::new(&config, 0, DType::F32, false).expect("tiny model builds");
    let learner = Learner::new(model, &TrainConfig::default()).expect("optimizer builds");
    let (signals, masks): (Vec<_>, Vec<_>) = (0..4).map(|s| window(s, len)).unzip();
    let batch = BatchPair {
        labeled: LabeledBatch {
            signals: signals.clone(),
            masks,
        },
        unlabeled: UnlabeledBatch {
            weak: signals.clone(),
            strong: signals,
        },
        pseudo: LabeledBatch {
            signals: Vec::new(),
            masks: Vec::new(),
        },
    };
    (learner, batch)
}
