use std::collections::BTreeMap;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, ramp_weight, Algorithm, TrainConfig};
use super::steps::{
    cps_step, fixmatch_step, mt_step, reco_step, scratch_step, self_training_step, BatchPair, LabeledBatch, Learner, Losses, StepSeeds,
    UnlabeledBatch,
};
use crate::augment::{apply_strong, apply_weak, AugmentPolicy};
use crate::dsp::PreparedExample;
use crate::error::{Error, Result};
use crate::eval::{confusion, evaluate, miou, EvalOptions, MiouClasses, Segmenter};
use crate::models::{ModelConfig, SegModel};
use crate::rng::{mix, stream};

const TAG_MODEL: u64 = 0x6d6f_64656c;
const TAG_PEER: u64 = 0x7065_6572;
const TAG_LABELED_ORDER: u64 = 0x6c6f_7264;
const TAG_UNLABELED_ORDER: u64 = 0x756f_7264;
const TAG_LABELED_AUG: u64 = 0x6c61_7567;
const TAG_WEAK_AUG: u64 = 0x7765_616b;
const TAG_STRONG_AUG: u64 = 0x7374_726f;
const TAG_DROP_LABELED: u64 = 0x646c_6162;
const TAG_DROP_UNLABELED: u64 = 0x6475_6e6c;
const TAG_SAMPLING: u64 = 0x7361_6d70;
const TAG_PSEUDO_ORDER: u64 = 0x706f_7264;
const TAG_PSEUDO_AUG: u64 = 0x7061_7567;

/// Everything that defines one training run besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub fs: f64,
    pub dtype: DType,
}

impl TrainSetup {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            model,
            train,
            augment: AugmentPolicy::default(),
            fs: 250.0,
            dtype: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()
    }
}

pub struct TrainData<'a> {
    /// Must carry masks.
    pub labeled: &'a [PreparedExample],
    pub unlabeled: &'a [PreparedExample],
    pub val: &'a [PreparedExample],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean of each loss term over the epoch's steps.
    pub losses: BTreeMap<String, f64>,
    pub val_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub algorithm: Algorithm,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub best_val_miou: f64,
    /// ST++ only: the histories of the first two phases.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub earlier_phases: Vec<Vec<EpochRecord>>,
    /// ST++ only: keys of the unlabeled records admitted in the second phase.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected: Vec<String>,
}

impl RunHistory {
    /// First epoch attaining the maximum validation mIoU.
    pub fn argmax_epoch(records: &[EpochRecord]) -> Option<usize> {
        let mut best: Option<&EpochRecord> = None;
        for r in records {
            if best.is_none_or(|b| r.val_miou > b.val_miou) {
                best = Some(r);
            }
        }
        best.map(|r| r.epoch)
    }
}

pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub best: SegModel,
    pub last: SegModel,
    pub history: RunHistory,
}

/// Which phase an epoch record belongs to (always 1 outside ST++).
pub type EpochObserver<'a> = dyn FnMut(usize, &EpochRecord) + 'a;

#[derive(Clone)]
struct Sample {
    signal: Vec<f32>,
    mask: Vec<u8>,
}

fn labeled_samples(examples: &[PreparedExample]) -> Result<Vec<Sample>> {
    examples
        .iter()
        .map(|e| {
            let mask = e
                .mask
                .clone()
                .ok_or_else(|| Error::Validation(format!("labeled example {} has no mask", e.key)))?;
            Ok(Sample {
                signal: e.signal.clone(),
                mask,
            })
        })
        .collect()
}

fn permutation(n: usize, seed: u64, cycle: u64, tag: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, cycle, tag)));
    idx
}

/// Iterations per epoch: one pass over the unlabeled pool, or over the
/// labeled set when there is no pool.
pub fn steps_per_epoch(n_labeled: usize, n_unlabeled: usize, config: &TrainConfig) -> usize {
    if n_unlabeled > 0 {
        n_unlabeled.div_ceil(config.unlabeled_batch_size)
    } else {
        n_labeled.div_ceil(config.batch_size)
    }
}

struct Loop<'a> {
    setup: &'a TrainSetup,
    labeled: Vec<Sample>,
    pseudo: Vec<Sample>,
    unlabeled: &'a [PreparedExample],
    val: &'a [PreparedExample],
    steps_per_epoch: usize,
    seed: u64,
}

struct LoopResult {
    best: SegModel,
    last: SegModel,
    records: Vec<EpochRecord>,
    snapshots: Vec<SegModel>,
}

enum State {
    Single(Learner),
    Teacher(Learner, SegModel),
    Pair(Learner, Learner),
}

impl State {
    /// The model that is validated and returned (model a for CPS).
    fn student(&self) -> &SegModel {
        match self {
            State::Single(l) | State::Teacher(l, _) | State::Pair(l, _) => &l.model,
        }
    }

    fn into_student(self) -> SegModel {
        match self {
            State::Single(l) | State::Teacher(l, _) | State::Pair(l, _) => l.model,
        }
    }
}

impl<'a> Loop<'a> {
    fn new_model(&self, seed: u64, projection: bool) -> Result<SegModel> {
        SegModel::new(&self.setup.model, seed, self.setup.dtype, projection)
    }

    fn clone_model(&self, m: &SegModel) -> Result<SegModel> {
        let c = self.new_model(0, m.has_projection())?;
        c.copy_from(m)?;
        Ok(c)
    }

    fn init(&self, algorithm: Algorithm) -> Result<State> {
        let cfg = &self.setup.train;
        let seed = mix(self.seed, 0, TAG_MODEL);
        Ok(match algorithm {
            Algorithm::Scratch | Algorithm::Fixmatch | Algorithm::Stpp => {
                State::Single(Learner::new(self.new_model(seed, false)?, cfg)?)
            }
            Algorithm::Mt | Algorithm::Reco => {
                let projection = algorithm == Algorithm::Reco;
                let student = self.new_model(seed, projection)?;
                let teacher = self.clone_model(&student)?;
                State::Teacher(Learner::new(student, cfg)?, teacher)
            }
            Algorithm::Cps => State::Pair(
                Learner::new(self.new_model(seed, false)?, cfg)?,
                Learner::new(self.new_model(mix(self.seed, 1, TAG_PEER), false)?, cfg)?,
            ),
        })
    }

    /// `count` samples of a pool read as an endless sequence of shuffled passes.
    fn cycled<'s>(&self, pool: &'s [Sample], step: usize, count: usize, tag: u64) -> Vec<&'s Sample> {
        let n = pool.len();
        let mut cache: Option<(usize, Vec<usize>)> = None;
        (0..count)
            .map(|j| {
                let g = step * count + j;
                let cycle = g / n;
                if cache.as_ref().is_none_or(|(c, _)| *c != cycle) {
                    cache = Some((cycle, permutation(n, self.seed, cycle as u64, tag)));
                }
                &pool[cache.as_ref().unwrap().1[g % n]]
            })
            .collect()
    }

    fn batch(&self, step: usize, epoch: usize, k: usize, with_unlabeled: bool) -> BatchPair {
        let cfg = &self.setup.train;
        let policy = &self.setup.augment;
        let mut labeled = LabeledBatch::default();
        for (j, s) in self.cycled(&self.labeled, step, cfg.batch_size, TAG_LABELED_ORDER).into_iter().enumerate() {
            let mut rng = stream(self.seed, step as u64, j as u64, TAG_LABELED_AUG);
            let (x, m) = apply_weak(&s.signal, &s.mask, policy, &mut rng);
            labeled.signals.push(x);
            labeled.masks.push(m);
        }
        let mut pseudo = LabeledBatch::default();
        if !self.pseudo.is_empty() {
            let picks = self.cycled(&self.pseudo, step, cfg.unlabeled_batch_size, TAG_PSEUDO_ORDER);
            for (j, s) in picks.into_iter().enumerate() {
                let mut rng = stream(self.seed, step as u64, j as u64, TAG_PSEUDO_AUG);
                let (x, m) = apply_weak(&s.signal, &s.mask, policy, &mut rng);
                pseudo.signals.push(apply_strong(&x, policy, &mut rng));
                pseudo.masks.push(m);
            }
        }
        let mut unlabeled = UnlabeledBatch::default();
        if with_unlabeled && !self.unlabeled.is_empty() {
            let order = permutation(self.unlabeled.len(), self.seed, epoch as u64, TAG_UNLABELED_ORDER);
            let ub = cfg.unlabeled_batch_size;
            for (j, &i) in order.iter().skip(k * ub).take(ub).enumerate() {
                let x = &self.unlabeled[i].signal;
                let dummy = vec![0u8; x.len()];
                let mut rng = stream(self.seed, step as u64, j as u64, TAG_WEAK_AUG);
                let (weak, _) = apply_weak(x, &dummy, policy, &mut rng);
                let mut rng = stream(self.seed, step as u64, j as u64, TAG_STRONG_AUG);
                let strong = apply_strong(&weak, policy, &mut rng);
                unlabeled.weak.push(weak);
                unlabeled.strong.push(strong);
            }
        }
        BatchPair {
            labeled,
            unlabeled,
            pseudo,
        }
    }

    fn validate(&self, model: &SegModel) -> Result<f64> {
        let report = evaluate(model, self.val, self.setup.fs, EvalOptions::default())?;
        report
            .miou
            .ok_or_else(|| Error::Validation("validation set carries no masks".into()))
    }

    fn run(
        &self,
        algorithm: Algorithm,
        snapshot_epochs: &[usize],
        phase: usize,
        observer: &mut EpochObserver<'_>,
    ) -> Result<LoopResult> {
        let cfg = &self.setup.train;
        let spe = self.steps_per_epoch;
        let mut state = self.init(algorithm)?;
        let best = self.clone_model(state.student())?;
        let mut best_score = f64::NEG_INFINITY;
        let mut records = Vec::new();
        let mut snapshots = Vec::new();
        let uses_unlabeled = !matches!(algorithm, Algorithm::Scratch | Algorithm::Stpp);
        for epoch in 0..cfg.epochs {
            let mut sums: BTreeMap<String, f64> = BTreeMap::new();
            let mut lr = 0.0;
            for k in 0..spe {
                let step = epoch * spe + k;
                lr = lr_at(step, spe, cfg);
                let batch = self.batch(step, epoch, k, uses_unlabeled);
                let seeds = StepSeeds {
                    labeled: mix(self.seed, step as u64, TAG_DROP_LABELED),
                    unlabeled: mix(self.seed, step as u64, TAG_DROP_UNLABELED),
                    sampling: mix(self.seed, step as u64, TAG_SAMPLING),
                };
                let weight = ramp_weight(step, spe, cfg);
                let losses: Result<Losses> = (|| {
                    Ok(match (&mut state, algorithm) {
                    (State::Single(l), Algorithm::Fixmatch) => fixmatch_step(l, &batch, lr, cfg, &seeds)?,
                    (State::Single(l), Algorithm::Stpp) => {
                        self_training_step(l, &batch, cfg.unsup_weight, lr, &seeds)?
                    }
                    (State::Single(l), _) => scratch_step(l, &batch, lr, &seeds)?,
                    (State::Teacher(s, t), Algorithm::Reco) => reco_step(s, t, &batch, weight, lr, cfg, &seeds)?,
                    (State::Teacher(s, t), _) => mt_step(s, t, &batch, weight, lr, cfg, &seeds)?,
                    (State::Pair(a, b), _) => {
                        let (la, lb) = cps_step(a, b, &batch, lr, cfg, &seeds)?;
                        let mut all = la;
                        all.extend(lb.into_iter().map(|(n, v)| (format!("{n}_b"), v)));
                        all
                    }
                    })
                })();
                let losses = losses.map_err(|e| match e {
                    Error::Divergence { detail, .. } => Error::Divergence {
                        epoch: epoch + 1,
                        step,
                        detail: format!("{algorithm}: {detail}"),
                    },
                    other => other,
                })?;
                for (name, v) in losses {
                    *sums.entry(name).or_insert(0.0) += v;
                }
            }
            let student = state.student();
            let val_miou = self.validate(student)?;
            let record = EpochRecord {
                epoch: epoch + 1,
                lr,
                losses: sums.into_iter().map(|(n, v)| (n, v / spe as f64)).collect(),
                val_miou,
            };
            if val_miou > best_score {
                best_score = val_miou;
                best.copy_from(student)?;
            }
            observer(phase, &record);
            records.push(record);
            if snapshot_epochs.contains(&(epoch + 1)) {
                snapshots.push(self.clone_model(student)?);
            }
        }
        let last = state.into_student();
        Ok(LoopResult {
            best,
            last,
            records,
            snapshots,
        })
    }
}

pub fn train(setup: &TrainSetup, data: TrainData<'_>) -> Result<TrainOutcome> {
    train_with(setup, data, &mut |_, _| {})
}

/// Trains `setup.train.algorithm`, calling `observer` after every epoch.
pub fn train_with(setup: &TrainSetup, data: TrainData<'_>, observer: &mut EpochObserver<'_>) -> Result<TrainOutcome> {
    setup.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::Validation("training needs at least one labeled example".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Validation("training needs a non-empty validation set".into()));
    }
    let cfg = &setup.train;
    let lp = Loop {
        setup,
        labeled: labeled_samples(data.labeled)?,
        pseudo: Vec::new(),
        unlabeled: data.unlabeled,
        val: data.val,
        steps_per_epoch: steps_per_epoch(data.labeled.len(), data.unlabeled.len(), cfg),
        seed: cfg.seed,
    };
    if cfg.algorithm == Algorithm::Stpp && !data.unlabeled.is_empty() {
        return stpp_train(lp, observer);
    }
    let result = lp.run(cfg.algorithm, &[], 1, observer)?;
    finish(cfg.algorithm, result, Vec::new(), Vec::new())
}

fn finish(
    algorithm: Algorithm,
    result: LoopResult,
    earlier_phases: Vec<Vec<EpochRecord>>,
    selected: Vec<String>,
) -> Result<TrainOutcome> {
    let best_epoch = RunHistory::argmax_epoch(&result.records).unwrap_or(0);
    let best_val_miou = result
        .records
        .iter()
        .find(|r| r.epoch == best_epoch)
        .map(|r| r.val_miou)
        .unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        best: result.best,
        last: result.last,
        history: RunHistory {
            algorithm,
            epochs: result.records,
            best_epoch,
            best_val_miou,
            earlier_phases,
            selected,
        },
    })
}

/// Reliability of each record: mean mIoU between every snapshot's prediction
/// and the final prediction.
pub fn stpp_reliability(snapshots: &[Vec<Vec<u8>>], last: &[Vec<u8>]) -> Result<Vec<f64>> {
    (0..last.len())
        .map(|i| {
            if snapshots.is_empty() {
                return Ok(1.0);
            }
            let mut total = 0.0;
            for snap in snapshots {
                total += miou(&confusion(&snap[i], &last[i])?, MiouClasses::All)?.1;
            }
            Ok(total / snapshots.len() as f64)
        })
        .collect()
}

/// Indices of the `ceil(frac · n)` most reliable records, most reliable
/// first; ties keep the original order.
pub fn stpp_select(reliability: &[f64], frac: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..reliability.len()).collect();
    order.sort_by(|&a, &b| reliability[b].total_cmp(&reliability[a]));
    let n = ((reliability.len() as f64 * frac).ceil() as usize).min(reliability.len());
    order.truncate(n);
    order
}

fn predict_all(model: &SegModel, examples: &[PreparedExample]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(16) {
        let signals: Vec<&[f32]> = chunk.iter().map(|e| e.signal.as_slice()).collect();
        out.extend(model.segment(&signals)?);
    }
    Ok(out)
}

/// Three-phase self-training: supervised warm start, retraining with the
/// most stable pseudo-labels, then retraining with every pseudo-label.
/// Pseudo-labeled records form a second, strongly augmented stream next to
/// the labeled one.
fn stpp_train(mut lp: Loop<'_>, observer: &mut EpochObserver<'_>) -> Result<TrainOutcome> {
    let cfg = &lp.setup.train;
    let e = cfg.epochs;
    let marks = [(e / 3).max(1), (2 * e / 3).max(1)];
    let unlabeled = lp.unlabeled;

    let phase1 = lp.run(Algorithm::Stpp, &marks, 1, observer)?;
    let final1 = predict_all(&phase1.last, unlabeled)?;
    let snaps = phase1
        .snapshots
        .iter()
        .map(|m| predict_all(m, unlabeled))
        .collect::<Result<Vec<_>>>()?;
    let reliability = stpp_reliability(&snaps, &final1)?;
    let chosen = stpp_select(&reliability, cfg.stpp_select_frac);
    let pseudo = |i: usize, mask: &[u8]| Sample {
        signal: unlabeled[i].signal.clone(),
        mask: mask.to_vec(),
    };

    lp.pseudo = chosen.iter().map(|&i| pseudo(i, &final1[i])).collect();
    let phase2 = lp.run(Algorithm::Stpp, &[], 2, observer)?;

    let rest: Vec<usize> = (0..unlabeled.len()).filter(|i| !chosen.contains(i)).collect();
    let rest_examples: Vec<PreparedExample> = rest.iter().map(|&i| unlabeled[i].clone()).collect();
    let relabeled = predict_all(&phase2.last, &rest_examples)?;
    lp.pseudo
        .extend(rest.iter().zip(&relabeled).map(|(&i, mask)| pseudo(i, mask)));
    let phase3 = lp.run(Algorithm::Stpp, &[], 3, observer)?;

    let selected = chosen.iter().map(|&i| unlabeled[i].key.clone()).collect();
    finish(Algorithm::Stpp, phase3, vec![phase1.records, phase2.records], selected)
}
