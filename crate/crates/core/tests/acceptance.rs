mod common;

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::DType;
use common::*;
use ecgseg::augment::{apply_strong, apply_weak, draw_strong, draw_weak, horizontal_flip, random_resized_crop, StrongOp};
use ecgseg::dsp::{bandpass, resample, zscore};
use ecgseg::eval::{confusion, miou, record_intervals, MiouClasses};
use ecgseg::experiments::{
    cmd_benchmark, cmd_evaluate, collect_runs, discover_runs, EvaluateRequest, ExperimentSpec, Protocol, BEST_CKPT,
    ROWS_FILE,
};
use ecgseg::ingest::Split;
use ecgseg::models::{ema_update, Backbone, ModelConfig};
use ecgseg::synth::{jitter_subject, synth_corpus, synth_record, CorpusSpec, SynthConfig};
use ecgseg::trainers::*;
use ecgseg::{AugmentPolicy, LabelRatio, PreprocessConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("took {:.1} s, limit {:.0} s", t.as_secs_f64(), limit.as_secs_f64()));
    }
    Ok(())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn metric_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let n = rng.random_range(1..=200);
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let (_, got) = miou(&confusion(&pred, &truth).unwrap(), MiouClasses::All).unwrap();
        let mut ious = Vec::new();
        for k in 0..4u8 {
            let (mut inter, mut union) = (0u64, 0u64);
            for i in 0..n {
                let (p, t) = (pred[i] == k, truth[i] == k);
                inter += u64::from(p && t);
                union += u64::from(p || t);
            }
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let want = ious.iter().sum::<f64>() / ious.len() as f64;
        ensure(got == want, || format!("pair {trial}: {got} != {want}"))?;
    }
    within(Duration::from_secs(10), start)?;
    Ok("1000 random pairs equal the per-position computation exactly".into())
}

fn interval_oracle() -> Check {
    let start = Instant::now();
    let template = SynthConfig {
        noise_level: 0.0,
        baseline_wander_amp: 0.0,
        ..SynthConfig::default()
    };
    let mut worst: f64 = 0.0;
    for i in 0..32 {
        let cfg = jitter_subject(&SynthConfig { seed: 100 + i as u64, ..template }, 7, i);
        let ex = synth_record(&cfg).map_err(|e| e.to_string())?;
        let got = record_intervals(ex.mask.as_ref().unwrap(), cfg.fs_hz);
        for (m, want) in [(got.pr_ms, cfg.pr_ms), (got.qrs_ms, cfg.qrs_ms), (got.qt_ms, cfg.qt_ms)] {
            let m = m.ok_or_else(|| format!("record {i}: interval undefined"))?;
            worst = worst.max((m - want).abs());
        }
    }
    ensure(worst <= 4.0, || format!("worst error {worst:.2} ms"))?;
    within(Duration::from_secs(10), start)?;
    Ok(format!("32/32 records within 4 ms, worst {worst:.2} ms"))
}

fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (TAU * freq * i as f64 / fs).sin()).collect()
}

fn central_rms(x: &[f64]) -> f64 {
    let mid = &x[x.len() / 4..3 * x.len() / 4];
    (mid.iter().map(|v| v * v).sum::<f64>() / mid.len() as f64).sqrt()
}

fn dsp_response() -> Check {
    let start = Instant::now();
    let fs = 250.0;
    let pc = PreprocessConfig::default();
    let gain_db = |freq: f64, seconds: f64| -> f64 {
        let x = sine(freq, fs, (seconds * fs) as usize);
        let y = bandpass(&x, fs, pc.band_lo_hz, pc.band_hi_hz).unwrap();
        20.0 * (central_rms(&y) / central_rms(&x)).log10()
    };
    let g10 = gain_db(10.0, 20.0);
    let g01 = gain_db(0.1, 400.0);
    let g60 = gain_db(60.0, 20.0);
    ensure(g10.abs() <= 1.0, || format!("10 Hz gain {g10:.3} dB"))?;
    ensure(g01 <= -20.0, || format!("0.1 Hz gain {g01:.1} dB"))?;
    ensure(g60 <= -20.0, || format!("60 Hz gain {g60:.1} dB"))?;
    let n = 2500;
    let centre = 1234;
    let sigma = 0.012 * fs;
    let qrs: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - centre as f64) / sigma).powi(2) / 2.0).exp())
        .collect();
    let y = bandpass(&qrs, fs, pc.band_lo_hz, pc.band_hi_hz).unwrap();
    let peak = (0..n).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
    ensure(peak == centre, || format!("QRS peak moved from {centre} to {peak}"))?;
    within(Duration::from_secs(5), start)?;
    Ok(format!(
        "10 Hz {g10:+.3} dB, 0.1 Hz {g01:.1} dB, 60 Hz {g60:.1} dB, QRS peak shift 0 samples"
    ))
}

fn resampler() -> Check {
    let n = 8000;
    let x = sine(5.0, 2000.0, n);
    let y = resample(&x, 2000.0, 250.0).map_err(|e| e.to_string())?;
    ensure(y.len() == n * 250 / 2000, || format!("length {} != {}", y.len(), n * 250 / 2000))?;
    let err = y
        .iter()
        .enumerate()
        .map(|(i, v)| (v - (TAU * 5.0 * i as f64 / 250.0).sin()).abs())
        .fold(0.0, f64::max);
    ensure(err < 1e-2, || format!("max abs error {err:e}"))?;
    Ok(format!("length {}, max abs error {err:.2e}", y.len()))
}

fn normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(10..3000);
        let valid = rng.random_range(2..=n);
        let offset = rng.random_range(-100.0..100.0);
        let scale = rng.random_range(0.01..50.0);
        let x: Vec<f64> = (0..n).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect();
        let z = zscore(&x, valid, 1e-8);
        ensure(z[valid..].iter().all(|&v| v == 0.0), || "padded tail is not exactly 0".into())?;
        let head = &z[..valid];
        let mean = head.iter().sum::<f64>() / valid as f64;
        let std = (head.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / valid as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }
    ensure(worst_mean < 1e-6, || format!("|mean| up to {worst_mean:e}"))?;
    ensure(worst_std < 1e-4, || format!("|std - 1| up to {worst_std:e}"))?;
    let flat = zscore(&[3.5; 400], 300, 1e-8);
    ensure(flat.iter().all(|&v| v == 0.0), || "constant input is not all zeros".into())?;
    Ok(format!("|mean| <= {worst_mean:.1e}, |std-1| <= {worst_std:.1e}, constant and padding exactly 0"))
}

fn augmentation() -> Check {
    let n = 250;
    let ramp: Vec<f32> = (0..n).map(|i| i as f32).collect();
    let ids: Vec<u8> = (0..n).map(|i| i as u8).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (x, m) = random_resized_crop(&ramp, &ids, (0.5, 1.0), &mut rng);
        for (xv, mv) in x.iter().zip(&m) {
            let p = *xv as f64;
            let ok = if (p.fract() - 0.5).abs() > 1e-3 {
                *mv as f64 == p.round()
            } else {
                *mv as f64 == p.floor() || *mv as f64 == p.ceil()
            };
            ensure(ok, || format!("crop maps signal index {p} to mask index {mv}"))?;
        }
    }
    let (fx, fm) = horizontal_flip(&ramp, &ids);
    ensure(
        (0..n).all(|k| fx[k] as usize == n - 1 - k && fm[k] as usize == n - 1 - k),
        || "flip index maps differ".into(),
    )?;

    let policy = AugmentPolicy {
        include_flip_in_weak: true,
        include_baseline_shift_in_strong: true,
        rand_n: 5,
        op_prob: 1.0,
        ..AugmentPolicy::default()
    };
    let labels: Vec<u8> = (0..n).map(|i| ((i / 20) % 4) as u8).collect();
    for _ in 0..100 {
        let (wx, wm) = apply_weak(&ramp, &labels, &policy, &mut rng);
        let before = wm.clone();
        let sx = apply_strong(&wx, &policy, &mut rng);
        ensure(sx.len() == wx.len() && wm == before, || "strong ops changed the mask".into())?;
    }

    let default = AugmentPolicy::default();
    let trials = 10_000;
    let flip_policy = AugmentPolicy {
        include_flip_in_weak: true,
        ..AugmentPolicy::default()
    };
    let mut fired = 0usize;
    let mut total = 0usize;
    let mut picked = [0usize; 4];
    let pool = default.effective_pool();
    for _ in 0..trials {
        for (op, fires) in draw_strong(&default, &mut rng) {
            picked[pool.iter().position(|o| *o == op).unwrap()] += 1;
            fired += usize::from(fires);
            total += 1;
        }
        for (_, fires) in draw_weak(&flip_policy, &mut rng).into_iter().skip(1) {
            fired += usize::from(fires);
            total += 1;
        }
    }
    let fire = fired as f64 / total as f64;
    ensure((fire - 0.5).abs() <= 0.02, || format!("fire frequency {fire:.4}"))?;
    let draws: Vec<f64> = picked.iter().map(|&c| c as f64 / trials as f64).collect();
    ensure(draws.iter().all(|f| (f - 0.75).abs() <= 0.02), || format!("draw frequencies {draws:?}"))?;
    ensure(!pool.contains(&StrongOp::BaselineShift), || "baseline shift in the default pool".into())?;
    Ok(format!(
        "crop/flip index maps agree, strong ops keep masks, fire {fire:.3}, draw {}",
        draws.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join("/")
    ))
}

fn schedule_and_ema() -> Check {
    let cfg = TrainConfig::default();
    let spe = 7;
    let w = cfg.warmup_epochs * spe;
    let last = cfg.epochs * spe - 1;
    ensure(lr_at(0, spe, &cfg) == 0.0, || "lr_at(0) != 0".into())?;
    let first = lr_at(w, spe, &cfg);
    let step = (lr_at(w, spe, &cfg) - lr_at(w - 1, spe, &cfg)).abs();
    ensure((first - 0.001).abs() <= step, || format!("first post-warmup lr {first}"))?;
    let end = lr_at(last, spe, &cfg);
    ensure((end - 0.0001).abs() <= 1e-6, || format!("last lr {end}"))?;

    let teacher = model(Backbone::Resnet18_1d, 1, DType::F64, true);
    let student = model(Backbone::Resnet18_1d, 2, DType::F64, true);
    let t0 = teacher.store().snapshot().unwrap();
    let s0 = student.store().snapshot().unwrap();
    ema_update(&teacher, &student, 0.99).unwrap();
    let t1 = teacher.store().snapshot().unwrap();
    let mut worst: f64 = 0.0;
    for (name, _) in teacher.store().vars() {
        for ((a, b), c) in t0[name].iter().zip(&s0[name]).zip(&t1[name]) {
            let want = 0.99 * a + 0.01 * b;
            let ulp = f64::EPSILON * a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
            ensure((c - want).abs() <= 4.0 * ulp, || format!("`{name}`: {c} vs {want}"))?;
            worst = worst.max((c - want).abs());
        }
    }
    Ok(format!("lr 0 -> {first} -> {end:.6}; EMA max deviation {worst:.1e} (f64 rounding)"))
}

fn algorithm_structure() -> Check {
    let cfg = TrainConfig::default();
    let data = batch(40, 3);
    let fm_model = (0..64)
        .flat_map(|s| Backbone::ALL.map(|b| (b, s)))
        .map(|(b, s)| model(b, s, DType::F32, false))
        .find(|m| quantiles(weak_confidence(m, &data.unlabeled.weak), &[1.0])[0] < cfg.conf_threshold)
        .ok_or("no random model with every confidence below 0.8")?;
    let fm = fixmatch_objective(&fm_model, &data, &cfg, &SEEDS).unwrap();
    ensure(fm.terms["unsup"] == 0.0 && fm.terms["mask_ratio"] == 0.0, || {
        format!("FixMatch unsup {} with mask ratio {}", fm.terms["unsup"], fm.terms["mask_ratio"])
    })?;

    for backbone in Backbone::ALL {
        let a = model(backbone, 1, DType::F32, false);
        let b = model(backbone, 2, DType::F32, false);
        let (ab_a, ab_b) = cps_objectives(&a, &b, &data, &cfg, &SEEDS).unwrap();
        let (ba_b, ba_a) = cps_objectives(&b, &a, &data, &cfg, &SEEDS).unwrap();
        ensure(ab_a.terms == ba_a.terms && ab_b.terms == ba_b.terms, || "CPS losses do not swap".into())?;
    }

    let outside = |c: &f64| *c < cfg.reco_easy || *c >= cfg.reco_hard;
    let (student, teacher) = (0..64)
        .flat_map(|s| Backbone::ALL.map(|b| (b, s)))
        .map(|(b, s)| (model(b, s + 100, DType::F32, true), model(b, s, DType::F32, true)))
        .find(|(_, t)| frame_confidence(t, &data.unlabeled.weak).iter().all(outside))
        .ok_or("no random teacher without confidences in [0.65, 0.8)")?;
    let reco = reco_objective(&student, &teacher, &data, 1.0, &cfg, &SEEDS).unwrap();
    ensure(reco.terms["contrast"] == 0.0 && reco.terms["queries"] == 0.0, || {
        format!("L_reco {} with {} queries", reco.terms["contrast"], reco.terms["queries"])
    })?;

    let diffs = weight_zero_diffs();
    let worst = diffs.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    ensure(worst < 1e-7, || format!("weight-zero updates differ: {diffs:?}"))?;
    Ok(format!(
        "FixMatch 0 below 0.8, CPS swap exact, L_reco 0 without queries, weight-0 max |dθ| {worst:.1e} over {} runs",
        diffs.len()
    ))
}

fn gradients() -> Check {
    all_gradient_checks()?;
    Ok("20 coordinates per loss, 6 losses x 2 backbones, within 1e-3 relative".into())
}

fn desk_corpora(dir: &Path) -> (PathBuf, PathBuf) {
    let mut labeled = CorpusSpec::new(
        SynthConfig {
            duration_s: 4.0,
            seed: 10,
            ..SynthConfig::default()
        },
        16,
        4,
    );
    labeled.dataset_id = "synth".into();
    let mut pool = CorpusSpec::new(
        SynthConfig {
            duration_s: 4.0,
            noise_level: 0.05,
            seed: 20,
            ..SynthConfig::default()
        },
        64,
        4,
    );
    pool.dataset_id = "pool".into();
    pool.labeled = false;
    (
        synth_corpus(&labeled, dir.join("synth")).unwrap(),
        synth_corpus(&pool, dir.join("pool")).unwrap(),
    )
}

fn desk_learning() -> Check {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let (labeled, pool) = desk_corpora(tmp.path());
    let spec = ExperimentSpec {
        protocol: Protocol::CrossDomain,
        datasets: vec![labeled],
        unlabeled_dataset: Some(pool),
        ratios: vec![LabelRatio::Sixteenth],
        algorithms: Algorithm::ALL.to_vec(),
        backbones: vec![Backbone::Resnet18_1d],
        seeds: vec![0, 1, 2],
        train: TrainConfig {
            epochs: 20,
            warmup_epochs: 2,
            lr_peak: 3e-3,
            lr_final: 3e-4,
            ..TrainConfig::default()
        },
        preprocess: PreprocessConfig {
            window_s: 4.0,
            ..PreprocessConfig::default()
        },
        model: ModelConfig::tiny(Backbone::Resnet18_1d, 8),
        out_dir: tmp.path().join("out"),
        ..ExperimentSpec::default()
    };
    let sweep = cmd_benchmark(&spec).map_err(|e| e.to_string())?;
    let (runs, skipped) = collect_runs(&discover_runs(std::slice::from_ref(&spec.out_dir)).unwrap());
    ensure(skipped.is_empty() && runs.len() == 18, || format!("{} runs, {} skipped", runs.len(), skipped.len()))?;
    let mut lines = Vec::new();
    let mut min_val = f64::INFINITY;
    let mut means = Vec::new();
    for algorithm in Algorithm::ALL {
        let mine: Vec<_> = runs.iter().filter(|r| r.manifest.cell.algorithm == algorithm).collect();
        let val: Vec<f64> = mine.iter().map(|r| r.manifest.best_val_miou.unwrap_or(f64::NEG_INFINITY)).collect();
        let test: Vec<f64> = mine
            .iter()
            .flat_map(|r| r.rows.iter().filter_map(|row| row.miou))
            .collect();
        let test_mean = test.iter().sum::<f64>() / test.len() as f64;
        let val_min = val.iter().copied().fold(f64::INFINITY, f64::min);
        min_val = min_val.min(val_min);
        means.push((algorithm, test_mean));
        lines.push(format!("{} val>={val_min:.3} test {test_mean:.4}", algorithm.name()));
    }
    let scratch = means.iter().find(|(a, _)| *a == Algorithm::Scratch).unwrap().1;
    let (best, best_mean) = means
        .iter()
        .filter(|(a, _)| *a != Algorithm::Scratch)
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    println!("    desk-scale summary: {} ({elapsed:.0} s, {} cells)", lines.join(", "), sweep.runs.len());
    let a = min_val >= 0.85;
    let b = best_mean > scratch;
    let detail = format!(
        "(a) min val mIoU {min_val:.4} {}; (b) {} {best_mean:.4} vs Scratch {scratch:.4} {}; {elapsed:.0} s",
        if a { "ok" } else { "< 0.85" },
        best.name(),
        if b { "ok" } else { "not above" }
    );
    ensure(a && b && elapsed < 1200.0, || detail.clone())?;
    Ok(detail)
}

/// Checks that bold cells are exactly the best printed means of each column
/// within each section.
fn bolding_follows_best(table: &str) -> Result<usize, String> {
    let lines: Vec<&str> = table.lines().filter(|l| l.starts_with('|')).collect();
    let split = |l: &str| -> Vec<String> { l.trim().trim_matches('|').split('|').map(|c| c.trim().to_string()).collect() };
    let header = split(lines[0]);
    let lower: Vec<bool> = header.iter().map(|h| h.contains('↓')).collect();
    let mut sections: Vec<Vec<Vec<String>>> = vec![Vec::new()];
    for l in &lines[2..] {
        let cells = split(l);
        if cells[1..].iter().all(|c| c.is_empty()) {
            sections.push(Vec::new());
        } else {
            sections.last_mut().unwrap().push(cells);
        }
    }
    let mut bolded = 0;
    for rows in sections.iter().filter(|s| !s.is_empty()) {
        for c in 1..header.len() {
            let parsed: Vec<(bool, Option<f64>)> = rows
                .iter()
                .map(|r| {
                    let bold = r[c].starts_with("**");
                    let v = r[c].trim_matches('*').split_whitespace().next().and_then(|t| t.parse().ok());
                    (bold, v)
                })
                .collect();
            let values = parsed.iter().filter_map(|p| p.1);
            let best = if lower[c] { values.reduce(f64::min) } else { values.reduce(f64::max) };
            for (bold, v) in &parsed {
                if *bold != (v.is_some() && *v == best) {
                    return Err(format!("column `{}` bolds {v:?} but the best is {best:?}", header[c]));
                }
                bolded += usize::from(*bold);
            }
        }
    }
    Ok(bolded)
}

fn tiny_sweep(datasets: Vec<PathBuf>, out: &Path) -> ExperimentSpec {
    ExperimentSpec {
        protocol: Protocol::InDomain,
        datasets,
        ratios: vec![LabelRatio::Sixteenth, LabelRatio::Eighth],
        algorithms: vec![Algorithm::Scratch, Algorithm::Mt, Algorithm::Fixmatch],
        backbones: Backbone::ALL.to_vec(),
        seeds: vec![0, 1],
        train: TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 4,
            unlabeled_batch_size: 4,
            ..TrainConfig::default()
        },
        preprocess: PreprocessConfig {
            window_s: 2.0,
            ..PreprocessConfig::default()
        },
        model: ModelConfig::tiny(Backbone::Resnet18_1d, 4),
        out_dir: out.to_path_buf(),
        ..ExperimentSpec::default()
    }
}

fn protocol_fidelity() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let a = corpus(tmp.path(), "alpha", 1, true);
    let b = corpus(tmp.path(), "beta", 2, true);
    let pool = corpus(tmp.path(), "pool", 3, false);
    let mobile = interval_only(tmp.path());

    let in_domain = cmd_benchmark(&tiny_sweep(vec![a.clone()], &tmp.path().join("in"))).map_err(|e| e.to_string())?;
    let t2 = in_domain.report.markdown.split("## In-domain").nth(1).ok_or("no in-domain section")?;
    ensure(
        t2.contains("| Methods | ResNet-18 + FCN 1/16 | ResNet-18 + FCN 1/8 | ViT-Tiny + FCN 1/16 | ViT-Tiny + FCN 1/8 |"),
        || format!("in-domain header:\n{t2}"),
    )?;
    for m in ["| Scratch |", "| MT |", "| FixMatch |", "| *alpha* |", "Best values are bolded"] {
        ensure(t2.contains(m), || format!("in-domain table lacks `{m}`:\n{t2}"))?;
    }
    let bold2 = bolding_follows_best(t2)?;

    let cross = ExperimentSpec {
        protocol: Protocol::CrossDomain,
        datasets: vec![a, b],
        unlabeled_dataset: Some(pool),
        interval_only_datasets: vec![mobile],
        ratios: Vec::new(),
        ..tiny_sweep(Vec::new(), &tmp.path().join("cross"))
    };
    let md = cmd_benchmark(&cross).map_err(|e| e.to_string())?.report.markdown;
    let (t3, t4) = md.split_once("## Out-domain, mobile").ok_or("no out-domain section")?;
    let t3 = t3.split("## Cross-domain").nth(1).ok_or("no cross-domain section")?;
    ensure(
        t3.contains("| Methods | mIoU (%) ↑ | MAE Avg. (ms) ↓ | MAE PR (ms) ↓ | MAE QRS (ms) ↓ | MAE QT (ms) ↓ |")
            && t3.contains("| **ResNet-18 + FCN** |")
            && t3.contains("| **ViT-Tiny + FCN** |"),
        || format!("cross-domain table:\n{t3}"),
    )?;
    ensure(
        !t4.contains("mIoU") && t4.contains("Only MAE (ms) was reported") && t4.contains("Avg. (ms) ↓"),
        || format!("interval-only table:\n{t4}"),
    )?;
    let bold3 = bolding_follows_best(t3)?;
    let bold4 = bolding_follows_best(t4)?;
    Ok(format!(
        "in-domain 3 methods x 2 ratios x 2 backbones, cross-domain mIoU+MAE, out-domain MAE only; {} bold cells all best",
        bold2 + bold3 + bold4
    ))
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(tmp.path(), "alpha", 4, true);
    let mut spec = tiny_sweep(vec![data.clone()], &tmp.path().join("a"));
    spec.ratios = vec![LabelRatio::Sixteenth];
    spec.algorithms = Algorithm::ALL.to_vec();
    spec.seeds = vec![5];
    let first = cmd_benchmark(&spec).map_err(|e| e.to_string())?;
    let second = cmd_benchmark(&ExperimentSpec {
        out_dir: tmp.path().join("b"),
        ..spec.clone()
    })
    .map_err(|e| e.to_string())?;
    for (x, y) in first.runs.iter().zip(&second.runs) {
        let (p, q) = (fs::read(x.dir.join(ROWS_FILE)).unwrap(), fs::read(y.dir.join(ROWS_FILE)).unwrap());
        ensure(p == q, || format!("{} differs between invocations", x.dir.display()))?;
    }
    let (p, q) = (
        fs::read(tmp.path().join("a/results.csv")).unwrap(),
        fs::read(tmp.path().join("b/results.csv")).unwrap(),
    );
    ensure(p == q, || "results.csv differs".into())?;
    let mut evals = Vec::new();
    for out in ["e1", "e2"] {
        cmd_evaluate(&EvaluateRequest {
            checkpoint: &first.runs[0].dir.join(BEST_CKPT),
            dataset: &data,
            split: Some(Split::Test),
            preprocess: spec.preprocess,
            classes: spec.eval_classes,
            expected_backbone: None,
            out_dir: &tmp.path().join(out),
        })
        .map_err(|e| e.to_string())?;
        evals.push(fs::read(tmp.path().join(out).join(ROWS_FILE)).unwrap());
    }
    ensure(evals[0] == evals[1], || "evaluate rows differ".into())?;
    Ok(format!("{} train cells and 2 evaluations byte-identical", first.runs.len()))
}

#[test]
fn acceptance_criteria() {
    let criteria: Vec<(u32, &str, fn() -> Check)> = vec![
        (1, "metric oracle", metric_oracle),
        (2, "interval oracle", interval_oracle),
        (3, "dsp frequency response", dsp_response),
        (4, "resampler", resampler),
        (5, "normalization", normalization),
        (6, "augmentation invariants", augmentation),
        (7, "schedule and EMA", schedule_and_ema),
        (8, "algorithm structure", algorithm_structure),
        (9, "gradient check", gradients),
        (10, "desk-scale learning", desk_learning),
        (11, "protocol fidelity", protocol_fidelity),
        (12, "determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match &result {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL {name}: {detail} [{secs:.1} s]");
                failed.push(n);
            }
        }
    }
    println!("criterion 13 DOCUMENTED full-scale reproduction: requires the clinical datasets and accelerator training");
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
