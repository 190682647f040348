#![allow(dead_code)]

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use ecgseg::models::{Backbone, Ctx, ModelConfig, ParamStore, SegModel};
use ecgseg::ingest::{DatasetInfo, DatasetWriter, LabelType};
use ecgseg::synth::{synth_corpus, synth_record, CorpusSpec, SynthConfig};
use ecgseg::trainers::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LEN: usize = 64;

pub fn batch(seed: u64, n: usize) -> BatchPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        let f = rng.random_range(0.05..0.4);
        let ph = rng.random_range(0.0..6.0);
        (0..LEN).map(|i| ((i as f64 * f + ph).sin() + rng.random_range(-0.2..0.2)) as f32).collect()
    };
    let mask = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        let shift = rng.random_range(0..16);
        (0..LEN).map(|i| (((i + shift) / 8) % 4) as u8).collect()
    };
    let labeled = LabeledBatch {
        signals: (0..n).map(|_| signal(&mut rng)).collect(),
        masks: (0..n).map(|_| mask(&mut rng)).collect(),
    };
    let weak: Vec<Vec<f32>> = (0..n).map(|_| signal(&mut rng)).collect();
    let strong = weak
        .iter()
        .map(|w| w.iter().map(|v| 1.3 * v + rng.random_range(-0.1..0.1)).collect())
        .collect();
    let pseudo = LabeledBatch {
        signals: (0..n).map(|_| signal(&mut rng)).collect(),
        masks: (0..n).map(|_| mask(&mut rng)).collect(),
    };
    BatchPair {
        labeled,
        unlabeled: UnlabeledBatch { weak, strong },
        pseudo,
    }
}

pub const SEEDS: StepSeeds = StepSeeds {
    labeled: 11,
    unlabeled: 12,
    sampling: 13,
};

pub fn tiny(backbone: Backbone) -> ModelConfig {
    ModelConfig::tiny(backbone, 16)
}

pub fn model(backbone: Backbone, seed: u64, dtype: DType, projection: bool) -> SegModel {
    SegModel::new(&tiny(backbone), seed, dtype, projection).unwrap()
}

pub fn clone_of(m: &SegModel) -> SegModel {
    let c = SegModel::new(m.config(), 999, m.dtype(), m.has_projection()).unwrap();
    c.copy_from(m).unwrap();
    c
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn quantiles(mut c: Vec<f64>, qs: &[f64]) -> Vec<f64> {
    c.sort_by(f64::total_cmp);
    qs.iter().map(|q| c[((c.len() - 1) as f64 * q) as usize]).collect()
}

/// A threshold in the middle of the widest gap between sorted confidences of
/// the central half, so finite differences never move a position across it.
pub fn widest_gap(mut c: Vec<f64>) -> f64 {
    c.sort_by(f64::total_cmp);
    let n = c.len();
    (n / 4..3 * n / 4)
        .map(|i| (c[i + 1] - c[i], (c[i + 1] + c[i]) / 2.0))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
        .1
}

/// Teacher frame confidences, as ReCo partitions them.
pub fn frame_confidence(m: &SegModel, signals: &[Vec<f32>]) -> Vec<f64> {
    let refs: Vec<&[f32]> = signals.iter().map(Vec::as_slice).collect();
    let out = m.forward(&m.input(&refs).unwrap(), &Ctx::eval()).unwrap();
    pseudo_labels(&out.frame_logits).unwrap().confidence.into_iter().flatten().collect()
}

/// Weak-view confidences, as FixMatch masks them.
pub fn weak_confidence(m: &SegModel, signals: &[Vec<f32>]) -> Vec<f64> {
    let refs: Vec<&[f32]> = signals.iter().map(Vec::as_slice).collect();
    let out = m.forward(&m.input(&refs).unwrap(), &Ctx::train(SEEDS.unlabeled)).unwrap();
    pseudo_labels(&out.logits).unwrap().confidence.into_iter().flatten().collect()
}

pub fn reco_config(teacher: &SegModel, data: &BatchPair, base: TrainConfig) -> TrainConfig {
    let q = quantiles(frame_confidence(teacher, &data.unlabeled.weak), &[0.3, 0.7]);
    TrainConfig {
        reco_easy: q[0],
        reco_hard: q[1],
        ..base
    }
}

pub fn gradient_check(name: &str, student: &SegModel, objective: &dyn Fn() -> Objective) -> Result<(), String> {
    let obj = objective();
    let grads = obj.total.backward().unwrap();
    let vars = student.store().vars();
    let sizes: Vec<usize> = vars.iter().map(|(_, v)| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let eps = 1e-5;
    let mut checked = 0;
    let mut nonzero = 0;
    while checked < 20 {
        let mut k = rng.random_range(0..total);
        let mut vi = 0;
        while k >= sizes[vi] {
            k -= sizes[vi];
            vi += 1;
        }
        let (pname, var) = &vars[vi];
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| ParamStore::values(g).unwrap()[k])
            .unwrap_or(0.0);
        let values = ParamStore::values(var.as_tensor()).unwrap();
        let at = |d: f64| {
            let mut v = values.clone();
            v[k] += d;
            student.store().assign(var, v).unwrap();
            objective().terms["total"]
        };
        let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
        student.store().assign(var, values).unwrap();
        let scale = analytic.abs().max(numeric.abs());
        if (analytic - numeric).abs() > 1e-3 * scale + 1e-9 {
            return Err(format!("{name}: {pname}[{k}] analytic {analytic:e} numeric {numeric:e}"));
        }
        checked += 1;
        nonzero += usize::from(analytic.abs() > 1e-8);
    }
    if nonzero < 10 {
        return Err(format!("{name}: only {nonzero} of 20 sampled coordinates carry gradient"));
    }
    Ok(())
}

/// Largest parameter distance from Scratch after three steps with every
/// unsupervised weight at zero, per backbone and algorithm.
pub fn weight_zero_diffs() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let cfg = TrainConfig {
        unsup_weight: 0.0,
        contrast_weight: 0.0,
        conf_threshold: 0.3,
        ..TrainConfig::default()
    };
    for backbone in Backbone::ALL {
        let base = model(backbone, 7, DType::F32, false);
        let mut scratch = Learner::new(clone_of(&base), &cfg).unwrap();
        let mut fixmatch = Learner::new(clone_of(&base), &cfg).unwrap();
        let mut stpp = Learner::new(clone_of(&base), &cfg).unwrap();
        let mut mt = Learner::new(clone_of(&base), &cfg).unwrap();
        let mt_teacher = clone_of(&base);
        let mut cps_a = Learner::new(clone_of(&base), &cfg).unwrap();
        let mut cps_b = Learner::new(model(backbone, 8, DType::F32, false), &cfg).unwrap();
        let reco_base = model(backbone, 7, DType::F32, true);
        let reco_cfg = reco_config(&reco_base, &batch(100, 3), cfg.clone());
        let mut reco = Learner::new(clone_of(&reco_base), &cfg).unwrap();
        let reco_teacher = clone_of(&reco_base);
        for step in 0..3u64 {
            let b = batch(100 + step, 3);
            let lr = 1e-2;
            scratch_step(&mut scratch, &b, lr, &SEEDS).unwrap();
            fixmatch_step(&mut fixmatch, &b, lr, &cfg, &SEEDS).unwrap();
            self_training_step(&mut stpp, &b, 0.0, lr, &SEEDS).unwrap();
            mt_step(&mut mt, &mt_teacher, &b, 0.0, lr, &cfg, &SEEDS).unwrap();
            cps_step(&mut cps_a, &mut cps_b, &b, lr, &cfg, &SEEDS).unwrap();
            let losses = reco_step(&mut reco, &reco_teacher, &b, 0.0, lr, &reco_cfg, &SEEDS).unwrap();
            assert!(losses["queries"] > 0.0, "the contrast term must be active for this check to mean anything");
        }
        for (name, m) in [
            ("fixmatch", &fixmatch.model),
            ("stpp", &stpp.model),
            ("mt", &mt.model),
            ("cps", &cps_a.model),
            ("reco", &reco.model),
        ] {
            out.push((format!("{}/{name}", backbone.name()), max_param_diff(&scratch.model, m).unwrap()));
        }
        assert!(max_param_diff(&scratch.model, &base).unwrap() > 1e-4);
    }
    out
}

/// Finite-difference check of every algorithm's total loss on both backbones.
pub fn all_gradient_checks() -> Result<(), String> {
    for backbone in Backbone::ALL {
        let tag = |n: &str| format!("{}/{n}", backbone.name());
        let data = batch(21, 2);
        let s = model(backbone, 1, DType::F64, false);
        let t = model(backbone, 2, DType::F64, false);
        let fm_cfg = TrainConfig {
            conf_threshold: widest_gap(weak_confidence(&s, &data.unlabeled.weak)),
            ..TrainConfig::default()
        };
        gradient_check(&tag("scratch"), &s, &|| scratch_objective(&s, &data, &SEEDS).unwrap())?;
        gradient_check(&tag("stpp"), &s, &|| self_training_objective(&s, &data, 1.0, &SEEDS).unwrap())?;
        gradient_check(&tag("mt"), &s, &|| mt_objective(&s, &t, &data, 1.0, &SEEDS).unwrap())?;
        let fm = fixmatch_objective(&s, &data, &fm_cfg, &SEEDS).unwrap();
        if fm.terms["mask_ratio"] == 0.0 {
            return Err("fixmatch: no confident position, the unsupervised term is untested".into());
        }
        gradient_check(&tag("fixmatch"), &s, &|| fixmatch_objective(&s, &data, &fm_cfg, &SEEDS).unwrap())?;
        gradient_check(&tag("cps"), &s, &|| cps_objectives(&s, &t, &data, &fm_cfg, &SEEDS).unwrap().0)?;

        let rs = model(backbone, 3, DType::F64, true);
        let rt = model(backbone, 4, DType::F64, true);
        let reco_cfg = reco_config(&rt, &data, TrainConfig {
            contrast_weight: 1.0,
            ..TrainConfig::default()
        });
        let obj = reco_objective(&rs, &rt, &data, 1.0, &reco_cfg, &SEEDS).unwrap();
        if obj.terms["queries"] == 0.0 || obj.terms["contrast"] == 0.0 {
            return Err("reco: no queries, the contrast term is untested".into());
        }
        gradient_check(&tag("reco"), &rs, &|| reco_objective(&rs, &rt, &data, 1.0, &reco_cfg, &SEEDS).unwrap())?;
    }
    Ok(())
}

/// Six subjects of two 2 s records each.
pub fn corpus(dir: &Path, id: &str, seed: u64, labeled: bool) -> PathBuf {
    let template = SynthConfig {
        duration_s: 2.0,
        seed,
        ..SynthConfig::default()
    };
    let mut spec = CorpusSpec::new(template, 6, 2);
    spec.dataset_id = id.into();
    spec.labeled = labeled;
    synth_corpus(&spec, dir.join(id)).unwrap();
    dir.join(id)
}

pub fn interval_only(dir: &Path) -> PathBuf {
    let root = dir.join("mobile");
    let mut w = DatasetWriter::create(
        &root,
        DatasetInfo {
            dataset_id: "mobile".into(),
            label_type: LabelType::IntervalOnly,
            official_split: false,
            adapter: "test".into(),
        },
    )
    .unwrap();
    for i in 0..3 {
        let mut ex = synth_record(&SynthConfig {
            duration_s: 2.0,
            seed: 50 + i,
            ..SynthConfig::default()
        })
        .unwrap();
        ex.record.record_id = format!("m{i}");
        ex.record.subject_id = format!("ms{i}");
        ex.record.dataset_id = "mobile".into();
        ex.mask = None;
        assert!(ex.intervals.is_some());
        w.add(&ex).unwrap();
    }
    w.finish(None).unwrap();
    root
}
