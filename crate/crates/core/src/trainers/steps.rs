use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::losses::{
    consistency_loss, masked_pseudo_loss, pseudo_labels, reco_contrast, reco_partition, supervised_loss,
    cross_entropy_map,
};
use crate::error::{Error, Result};
use crate::models::{Ctx, ParamStore, SegModel};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledBatch {
    pub signals: Vec<Vec<f32>>,
    pub masks: Vec<Vec<u8>>,
}

/// Weak and strong views of the same unlabeled records; the strong view is
/// the weak view passed through the strong policy, so positions align.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnlabeledBatch {
    pub weak: Vec<Vec<f32>>,
    pub strong: Vec<Vec<f32>>,
}

impl UnlabeledBatch {
    pub fn is_empty(&self) -> bool {
        self.weak.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchPair {
    pub labeled: LabeledBatch,
    pub unlabeled: UnlabeledBatch,
    /// Strongly augmented records with fixed pseudo-masks (ST++ re-training).
    pub pseudo: LabeledBatch,
}

impl BatchPair {
    pub fn validate(&self) -> Result<()> {
        let lab = &self.labeled;
        if lab.signals.is_empty() || lab.signals.len() != lab.masks.len() {
            return Err(Error::Validation("labeled batch must be non-empty with one mask per signal".into()));
        }
        let len = lab.signals[0].len();
        let all = lab
            .signals
            .iter()
            .map(Vec::len)
            .chain(lab.masks.iter().map(Vec::len))
            .chain(self.unlabeled.weak.iter().map(Vec::len))
            .chain(self.unlabeled.strong.iter().map(Vec::len))
            .chain(self.pseudo.signals.iter().map(Vec::len))
            .chain(self.pseudo.masks.iter().map(Vec::len));
        if all.into_iter().any(|l| l != len) {
            return Err(Error::Validation(format!("every signal and mask in a batch must have length {len}")));
        }
        if self.pseudo.signals.len() != self.pseudo.masks.len() {
            return Err(Error::Validation("pseudo-labeled batch needs one mask per signal".into()));
        }
        if self.unlabeled.weak.len() != self.unlabeled.strong.len() {
            return Err(Error::Validation("weak and strong views differ in count".into()));
        }
        Ok(())
    }
}

/// Dropout seeds of one step. The labeled seed is shared by every algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeeds {
    pub labeled: u64,
    pub unlabeled: u64,
    pub sampling: u64,
}

pub type Losses = BTreeMap<String, f64>;

/// A differentiable total loss, its named terms and the training-mode
/// forward contexts whose batch statistics belong to the optimized model.
pub struct Objective {
    pub total: Tensor,
    pub terms: Losses,
    pub contexts: Vec<Ctx>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
    v.iter().map(Vec::as_slice).collect()
}

struct Supervised {
    loss: Tensor,
    ctx: Ctx,
}

fn supervised(model: &SegModel, batch: &LabeledBatch, seeds: &StepSeeds) -> Result<Supervised> {
    let ctx = Ctx::train(seeds.labeled);
    let x = model.input(&refs(&batch.signals))?;
    let out = model.forward(&x, &ctx)?;
    Ok(Supervised {
        loss: supervised_loss(&out.logits, &batch.masks)?,
        ctx,
    })
}

fn finish(sup: Supervised, extra: Vec<(&str, Tensor, f64)>, mut contexts: Vec<Ctx>) -> Result<Objective> {
    let mut terms = Losses::new();
    terms.insert("sup".into(), scalar(&sup.loss)?);
    let mut total = sup.loss;
    for (name, term, weight) in extra {
        terms.insert(name.into(), scalar(&term)?);
        total = (total + term.affine(weight, 0.0)?)?;
    }
    terms.insert("total".into(), scalar(&total)?);
    contexts.insert(0, sup.ctx);
    Ok(Objective { total, terms, contexts })
}

pub fn scratch_objective(model: &SegModel, batch: &BatchPair, seeds: &StepSeeds) -> Result<Objective> {
    batch.validate()?;
    finish(supervised(model, &batch.labeled, seeds)?, Vec::new(), Vec::new())
}

/// Supervised loss plus `weight` times the loss on pseudo-labeled records.
/// Without pseudo-labeled records this is the Scratch objective.
pub fn self_training_objective(model: &SegModel, batch: &BatchPair, weight: f64, seeds: &StepSeeds) -> Result<Objective> {
    batch.validate()?;
    let sup = supervised(model, &batch.labeled, seeds)?;
    if batch.pseudo.signals.is_empty() {
        return finish(sup, Vec::new(), Vec::new());
    }
    let ctx = Ctx::train(seeds.unlabeled);
    let out = model.forward(&model.input(&refs(&batch.pseudo.signals))?, &ctx)?;
    let loss = supervised_loss(&out.logits, &batch.pseudo.masks)?;
    finish(sup, vec![("pseudo", loss, weight)], vec![ctx])
}

/// Student on strong views against teacher probabilities on weak views.
pub fn mt_objective(
    student: &SegModel,
    teacher: &SegModel,
    batch: &BatchPair,
    weight: f64,
    seeds: &StepSeeds,
) -> Result<Objective> {
    batch.validate()?;
    let sup = supervised(student, &batch.labeled, seeds)?;
    if batch.unlabeled.is_empty() {
        return finish(sup, Vec::new(), Vec::new());
    }
    let ctx = Ctx::train(seeds.unlabeled);
    let s = student.forward(&student.input(&refs(&batch.unlabeled.strong))?, &ctx)?;
    let t = teacher.forward(&teacher.input(&refs(&batch.unlabeled.weak))?, &Ctx::eval())?;
    let target = candle_nn::ops::softmax(&t.logits.detach(), 1)?;
    let cons = consistency_loss(&s.logits, &target)?;
    finish(sup, vec![("unsup", cons, weight)], vec![ctx])
}

pub fn fixmatch_objective(model: &SegModel, batch: &BatchPair, config: &TrainConfig, seeds: &StepSeeds) -> Result<Objective> {
    batch.validate()?;
    let sup = supervised(model, &batch.labeled, seeds)?;
    if batch.unlabeled.is_empty() {
        return finish(sup, Vec::new(), Vec::new());
    }
    let weak_ctx = Ctx::train(seeds.unlabeled);
    let weak = model.forward(&model.input(&refs(&batch.unlabeled.weak))?, &weak_ctx)?;
    let pseudo = pseudo_labels(&weak.logits)?;
    let ctx = Ctx::train(seeds.unlabeled ^ 0x5354_524f_4e47);
    let strong = model.forward(&model.input(&refs(&batch.unlabeled.strong))?, &ctx)?;
    let (unsup, n_conf) = masked_pseudo_loss(&strong.logits, &pseudo, config.conf_threshold)?;
    let mut obj = finish(sup, vec![("unsup", unsup, config.unsup_weight)], vec![ctx])?;
    let positions = pseudo.confidence.iter().map(Vec::len).sum::<usize>().max(1);
    obj.terms.insert("mask_ratio".into(), n_conf as f64 / positions as f64);
    Ok(obj)
}

/// Objectives of both CPS models; each model's pseudo-labels supervise the other.
pub fn cps_objectives(
    a: &SegModel,
    b: &SegModel,
    batch: &BatchPair,
    config: &TrainConfig,
    seeds: &StepSeeds,
) -> Result<(Objective, Objective)> {
    batch.validate()?;
    let sup_a = supervised(a, &batch.labeled, seeds)?;
    let sup_b = supervised(b, &batch.labeled, seeds)?;
    if batch.unlabeled.is_empty() {
        return Ok((finish(sup_a, Vec::new(), Vec::new())?, finish(sup_b, Vec::new(), Vec::new())?));
    }
    let ctx_a = Ctx::train(seeds.unlabeled);
    let ctx_b = Ctx::train(seeds.unlabeled);
    let la = a.forward(&a.input(&refs(&batch.unlabeled.weak))?, &ctx_a)?.logits;
    let lb = b.forward(&b.input(&refs(&batch.unlabeled.weak))?, &ctx_b)?.logits;
    let pa = pseudo_labels(&la)?;
    let pb = pseudo_labels(&lb)?;
    let cross_a = cross_entropy_map(&la, &pb.labels)?.mean_all()?;
    let cross_b = cross_entropy_map(&lb, &pa.labels)?.mean_all()?;
    Ok((
        finish(sup_a, vec![("unsup", cross_a, config.unsup_weight)], vec![ctx_a])?,
        finish(sup_b, vec![("unsup", cross_b, config.unsup_weight)], vec![ctx_b])?,
    ))
}

/// Regional contrast on frame embeddings. Teacher predictions on the weak
/// view decide prototypes and queries; prototypes average teacher embeddings,
/// queries are student embeddings of the strong view.
pub fn reco_loss(
    student_embed: &Tensor,
    teacher_embed: &Tensor,
    teacher_frame_logits: &Tensor,
    config: &TrainConfig,
    sampling_seed: u64,
) -> Result<(Tensor, usize)> {
    let (b, p, f) = student_embed.dims3()?;
    let classes = teacher_frame_logits.dim(1)?;
    let pseudo = pseudo_labels(teacher_frame_logits)?;
    let part = reco_partition(&pseudo.labels, &pseudo.confidence, classes, config.reco_easy, config.reco_hard);
    let z_t = teacher_embed.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling_seed);
    let mut protos: Vec<f64> = Vec::new();
    let mut proto_of_class = vec![None; classes];
    for (c, members) in part.prototypes.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; p];
        for &(bi, fi) in members {
            for (k, m) in mean.iter_mut().enumerate() {
                *m += z_t[bi][k][fi];
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        protos.extend(mean.iter().map(|v| v / norm));
        proto_of_class[c] = Some(protos.len() / p - 1);
    }
    let mut rows: Vec<u32> = Vec::new();
    let mut targets = Vec::new();
    for (c, qs) in part.queries.iter().enumerate() {
        let Some(k) = proto_of_class[c] else { continue };
        let take = qs.len().min(config.queries_per_class);
        for i in index::sample(&mut rng, qs.len(), take) {
            let (bi, fi) = qs[i];
            rows.push((bi * f + fi) as u32);
            targets.push(k);
        }
    }
    let device = student_embed.device();
    if rows.is_empty() {
        return Ok((Tensor::zeros((), student_embed.dtype(), device)?, 0));
    }
    let n_protos = protos.len() / p;
    let protos = Tensor::from_vec(protos, (n_protos, p), device)?.to_dtype(student_embed.dtype())?;
    let flat = student_embed.transpose(1, 2)?.contiguous()?.reshape((b * f, p))?;
    let n = rows.len();
    let queries = flat.index_select(&Tensor::from_vec(rows, n, device)?, 0)?;
    Ok((reco_contrast(&queries, &targets, &protos, config.contrast_temp)?, n))
}

pub fn reco_objective(
    student: &SegModel,
    teacher: &SegModel,
    batch: &BatchPair,
    weight: f64,
    config: &TrainConfig,
    seeds: &StepSeeds,
) -> Result<Objective> {
    batch.validate()?;
    let sup = supervised(student, &batch.labeled, seeds)?;
    if batch.unlabeled.is_empty() {
        return finish(sup, Vec::new(), Vec::new());
    }
    let ctx = Ctx::train(seeds.unlabeled);
    let s = student.forward(&student.input(&refs(&batch.unlabeled.strong))?, &ctx)?;
    let t = teacher.forward(&teacher.input(&refs(&batch.unlabeled.weak))?, &Ctx::eval())?;
    let target = candle_nn::ops::softmax(&t.logits.detach(), 1)?;
    let cons = consistency_loss(&s.logits, &target)?;
    let z_s = student.project(&s.features)?;
    let z_t = teacher.project(&t.features)?;
    let (contrast, n_queries) = reco_loss(&z_s, &z_t, &t.frame_logits, config, seeds.sampling)?;
    let mut obj = finish(
        sup,
        vec![("unsup", cons, weight), ("contrast", contrast, config.contrast_weight)],
        vec![ctx],
    )?;
    obj.terms.insert("queries".into(), n_queries as f64);
    Ok(obj)
}

/// A model with its optimizer.
pub struct Learner {
    pub model: SegModel,
    opt: AdamW,
}

impl Learner {
    pub fn new(model: SegModel, config: &TrainConfig) -> Result<Self> {
        let params = ParamsAdamW {
            lr: 0.0,
            weight_decay: config.weight_decay,
            ..ParamsAdamW::default()
        };
        let opt = AdamW::new(model.store().trainable(), params)?;
        Ok(Self { model, opt })
    }

    /// One optimizer step on `objective`, then the running-statistics update.
    pub fn apply(&mut self, objective: &Objective, lr: f64) -> Result<()> {
        let total = objective.terms.get("total").copied().unwrap_or(f64::NAN);
        if !total.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                step: 0,
                detail: format!("non-finite loss {total} ({:?})", objective.terms),
            });
        }
        self.opt.set_learning_rate(lr);
        self.opt.backward_step(&objective.total)?;
        for ctx in &objective.contexts {
            self.model.commit_batch_stats(ctx)?;
        }
        Ok(())
    }
}

pub fn scratch_step(learner: &mut Learner, batch: &BatchPair, lr: f64, seeds: &StepSeeds) -> Result<Losses> {
    let obj = scratch_objective(&learner.model, batch, seeds)?;
    learner.apply(&obj, lr)?;
    Ok(obj.terms)
}

pub fn self_training_step(
    learner: &mut Learner,
    batch: &BatchPair,
    weight: f64,
    lr: f64,
    seeds: &StepSeeds,
) -> Result<Losses> {
    let obj = self_training_objective(&learner.model, batch, weight, seeds)?;
    learner.apply(&obj, lr)?;
    Ok(obj.terms)
}

#[allow(clippy::too_many_arguments)]
pub fn mt_step(
    student: &mut Learner,
    teacher: &SegModel,
    batch: &BatchPair,
    weight: f64,
    lr: f64,
    config: &TrainConfig,
    seeds: &StepSeeds,
) -> Result<Losses> {
    let obj = mt_objective(&student.model, teacher, batch, weight, seeds)?;
    student.apply(&obj, lr)?;
    crate::models::ema_update(teacher, &student.model, config.ema_decay)?;
    Ok(obj.terms)
}

pub fn fixmatch_step(learner: &mut Learner, batch: &BatchPair, lr: f64, config: &TrainConfig, seeds: &StepSeeds) -> Result<Losses> {
    let obj = fixmatch_objective(&learner.model, batch, config, seeds)?;
    learner.apply(&obj, lr)?;
    Ok(obj.terms)
}

/// Steps both models; returns (losses of a, losses of b).
pub fn cps_step(
    a: &mut Learner,
    b: &mut Learner,
    batch: &BatchPair,
    lr: f64,
    config: &TrainConfig,
    seeds: &StepSeeds,
) -> Result<(Losses, Losses)> {
    let (oa, ob) = cps_objectives(&a.model, &b.model, batch, config, seeds)?;
    a.apply(&oa, lr)?;
    b.apply(&ob, lr)?;
    Ok((oa.terms, ob.terms))
}

#[allow(clippy::too_many_arguments)]
pub fn reco_step(
    student: &mut Learner,
    teacher: &SegModel,
    batch: &BatchPair,
    weight: f64,
    lr: f64,
    config: &TrainConfig,
    seeds: &StepSeeds,
) -> Result<Losses> {
    let obj = reco_objective(&student.model, teacher, batch, weight, config, seeds)?;
    student.apply(&obj, lr)?;
    crate::models::ema_update(teacher, &student.model, config.ema_decay)?;
    Ok(obj.terms)
}

/// Largest absolute difference between same-named parameters of two models,
/// over the parameters of `a`.
pub fn max_param_diff(a: &SegModel, b: &SegModel) -> Result<f64> {
    let mut worst = 0.0f64;
    for (name, var) in a.store().vars() {
        let other = b
            .store()
            .var(name)
            .ok_or_else(|| Error::Validation(format!("second model has no `{name}`")))?;
        let x = ParamStore::values(var.as_tensor())?;
        let y = ParamStore::values(other.as_tensor())?;
        worst = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}
