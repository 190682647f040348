//! Supervised baseline, the five semi-supervised algorithms, the learning
//! rate schedule and the training loop with validation-based selection.

mod config;
mod losses;
mod run;
mod steps;

pub use config::{lr_at, ramp_weight, Algorithm, TrainConfig};
pub use losses::{
    consistency_loss, cross_entropy_map, masked_pseudo_loss, pseudo_labels, reco_contrast, reco_partition,
    supervised_loss, Pseudo, RecoPartition,
};
pub use run::{
    steps_per_epoch, stpp_reliability, stpp_select, train, train_with, EpochObserver, EpochRecord, RunHistory,
    TrainData, TrainOutcome, TrainSetup,
};
pub use steps::{
    cps_objectives, cps_step, fixmatch_objective, fixmatch_step, max_param_diff, mt_objective, mt_step, reco_loss,
    reco_objective, reco_step, scratch_objective, scratch_step, self_training_objective, self_training_step, BatchPair, LabeledBatch, Learner, Losses, Objective,
    StepSeeds, UnlabeledBatch,
};
