//! Oracle-labelled synthetic ECG: Gaussian P and T waves, a biphasic QRS
//! complex, additive noise and baseline wander. Span boundaries are where
//! the generating kernels are placed, so labels never depend on the noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix;
use crate::eval::{WaveClass, WaveSpan};
use crate::ingest::{
    assign_label_subsets, write_json, spans_to_mask, subject_split, DatasetInfo,
    DatasetWriter, EcgRecord, LabelType, LabeledExample, ReferenceIntervals, Split,
};

/// Frequency of the sinusoidal baseline wander.
const WANDER_HZ: f64 = 0.3;
/// Beat-to-beat amplitude variation.
const BEAT_AMP_JITTER: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub fs_hz: f64,
    pub duration_s: f64,
    pub heart_rate_bpm: f64,
    pub pr_ms: f64,
    pub qrs_ms: f64,
    pub qt_ms: f64,
    /// Width of the P kernel.
    pub p_dur_ms: f64,
    /// Width of the T kernel.
    pub t_dur_ms: f64,
    pub p_amp_mv: f64,
    pub qrs_amp_mv: f64,
    pub t_amp_mv: f64,
    pub noise_level: f64,
    pub baseline_wander_amp: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            fs_hz: 250.0,
            duration_s: 10.0,
            heart_rate_bpm: 60.0,
            pr_ms: 160.0,
            qrs_ms: 90.0,
            qt_ms: 380.0,
            p_dur_ms: 100.0,
            t_dur_ms: 160.0,
            p_amp_mv: 0.15,
            qrs_amp_mv: 1.2,
            t_amp_mv: 0.3,
            noise_level: 0.0,
            baseline_wander_amp: 0.0,
            seed: 0,
        }
    }
}

/// Sample-domain geometry of one beat, relative to the beat start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeatGeometry {
    pub period: usize,
    pub p: WaveSpan,
    pub qrs: WaveSpan,
    pub t: WaveSpan,
}

fn samples(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).round() as usize
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fs_hz", self.fs_hz),
            ("duration_s", self.duration_s),
            ("heart_rate_bpm", self.heart_rate_bpm),
            ("pr_ms", self.pr_ms),
            ("qrs_ms", self.qrs_ms),
            ("p_dur_ms", self.p_dur_ms),
            ("t_dur_ms", self.t_dur_ms),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("synth {name} must be positive, got {v}")));
        }
        if !(self.qt_ms > self.qrs_ms) {
            return Err(Error::Config(format!(
                "synth qt_ms ({}) must exceed qrs_ms ({})",
                self.qt_ms, self.qrs_ms
            )));
        }
        if !(60_000.0 / self.heart_rate_bpm > self.qt_ms + self.pr_ms) {
            return Err(Error::Config(format!(
                "beat period {:.1} ms cannot hold PR {} ms + QT {} ms",
                60_000.0 / self.heart_rate_bpm,
                self.pr_ms,
                self.qt_ms
            )));
        }
        if self.noise_level < 0.0 || self.baseline_wander_amp < 0.0 {
            return Err(Error::Config("noise and wander amplitudes must be non-negative".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<BeatGeometry> {
        self.validate()?;
        let fs = self.fs_hz;
        let period = samples(60_000.0 / self.heart_rate_bpm, fs);
        let pr = samples(self.pr_ms, fs);
        let qrs = samples(self.qrs_ms, fs).max(1);
        let qt = samples(self.qt_ms, fs);
        let p_len = samples(self.p_dur_ms, fs).max(1);
        let t_len = samples(self.t_dur_ms, fs).max(1);
        if pr + qt > period {
            return Err(Error::Validation("beat does not fit in its period".into()));
        }
        let p_on = (period - pr - qt) / 2;
        let q_on = p_on + pr;
        let q_off = q_on + qrs - 1;
        let t_off = q_on + qt - 1;
        if p_len > pr || t_off + 1 < t_len || t_off + 1 - t_len <= q_off {
            return Err(Error::Validation(format!(
                "infeasible beat geometry: P width {p_len}, PR {pr}, QRS {qrs}, QT {qt}, T width {t_len} samples"
            )));
        }
        Ok(BeatGeometry {
            period,
            p: WaveSpan::new(WaveClass::P, p_on, p_on + p_len - 1),
            qrs: WaveSpan::new(WaveClass::Qrs, q_on, q_off),
            t: WaveSpan::new(WaveClass::T, t_off + 1 - t_len, t_off),
        })
    }
}

fn gaussian(t: f64, sigma: f64) -> f64 {
    (-0.5 * (t / sigma).powi(2)).exp()
}

/// Adds `kernel(t)` over the span, with `t` measured from the span centre.
fn place(wave: &mut [f32], span: &WaveSpan, kernel: impl Fn(f64) -> f64) {
    let centre = 0.5 * (span.onset_idx + span.offset_idx) as f64;
    for i in span.onset_idx..=span.offset_idx {
        wave[i] += kernel(i as f64 - centre) as f32;
    }
}

/// One beat of length `period`, zero outside its three spans.
pub fn synth_beat<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<(Vec<f32>, [WaveSpan; 3])> {
    let geo = config.geometry()?;
    let mut jitter = || 1.0 + rng.random_range(-BEAT_AMP_JITTER..=BEAT_AMP_JITTER);
    let (pa, qa, ta) = (
        config.p_amp_mv * jitter(),
        config.qrs_amp_mv * jitter(),
        config.t_amp_mv * jitter(),
    );
    let mut wave = vec![0.0f32; geo.period];

    let p_sigma = geo.p.len() as f64 / 6.0;
    place(&mut wave, &geo.p, |t| pa * gaussian(t, p_sigma));

    // Narrow positive spike minus a wider negative lobe: Q and S deflections
    // around a dominant R peak, symmetric about the span centre.
    let narrow = (geo.qrs.len() as f64 / 8.0).max(0.5);
    let wide = 2.0 * narrow;
    let lobe = 0.4;
    place(&mut wave, &geo.qrs, |t| {
        qa * (gaussian(t, narrow) - lobe * gaussian(t, wide)) / (1.0 - lobe)
    });

    let t_sigma = geo.t.len() as f64 / 6.0;
    place(&mut wave, &geo.t, |t| ta * gaussian(t, t_sigma));

    Ok((wave, [geo.p, geo.qrs, geo.t]))
}

/// A full record: beats tiled at the configured rate, then noise and wander.
pub fn synth_record(config: &SynthConfig) -> Result<LabeledExample> {
    let geo = config.geometry()?;
    let n = (config.duration_s * config.fs_hz).round() as usize;
    if n < geo.period {
        return Err(Error::Validation(format!(
            "record of {n} samples is shorter than one beat period ({})",
            geo.period
        )));
    }
    let mut beat_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x6e6f697365, 0));

    let mut samples_mv = vec![0.0f32; n];
    let mut spans = Vec::new();
    for k in 0..n / geo.period {
        let start = k * geo.period;
        let (beat, beat_spans) = synth_beat(config, &mut beat_rng)?;
        for (dst, src) in samples_mv[start..start + geo.period].iter_mut().zip(&beat) {
            *dst += src;
        }
        spans.extend(beat_spans.iter().map(|s| WaveSpan::new(s.wave_class, s.onset_idx + start, s.offset_idx + start)));
    }
    let mask = spans_to_mask(&spans, n)?;

    if config.noise_level > 0.0 {
        let normal = Normal::new(0.0, config.noise_level).expect("non-negative std");
        for v in samples_mv.iter_mut() {
            *v += normal.sample(&mut noise_rng) as f32;
        }
    }
    if config.baseline_wander_amp > 0.0 {
        let phase = noise_rng.random_range(0.0..std::f64::consts::TAU);
        for (i, v) in samples_mv.iter_mut().enumerate() {
            let t = i as f64 / config.fs_hz;
            *v += (config.baseline_wander_amp * (std::f64::consts::TAU * WANDER_HZ * t + phase).sin()) as f32;
        }
    }

    Ok(LabeledExample {
        record: EcgRecord {
            record_id: "synth".into(),
            subject_id: "synth".into(),
            dataset_id: "synth".into(),
            lead_id: "II".into(),
            fs_hz: config.fs_hz,
            samples: samples_mv,
        },
        mask: Some(mask),
        intervals: Some(ReferenceIntervals {
            pr_ms: Some(config.pr_ms),
            qrs_ms: Some(config.qrs_ms),
            qt_ms: Some(config.qt_ms),
        }),
    })
}

/// Per-subject parameters: ±10% rate and amplitudes, ±10 ms intervals.
pub fn jitter_subject(template: &SynthConfig, seed: u64, subject: usize) -> SynthConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, subject as u64, 0x7375626a));
    let mut scale = || rng.random_range(0.9..=1.1);
    let mut cfg = *template;
    cfg.heart_rate_bpm *= scale();
    cfg.p_amp_mv *= scale();
    cfg.qrs_amp_mv *= scale();
    cfg.t_amp_mv *= scale();
    let mut shift = || rng.random_range(-10.0..=10.0);
    cfg.pr_ms += shift();
    cfg.qrs_ms += shift();
    cfg.qt_ms += shift();
    cfg
}

/// What to generate and where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub template: SynthConfig,
    pub n_subjects: usize,
    pub per_subject: usize,
    pub dataset_id: String,
    /// Write masks and reference intervals; unlabeled pools set this to false.
    pub labeled: bool,
    /// Seed of the subject split and label subsets written with the corpus.
    pub split_seed: u64,
}

impl CorpusSpec {
    pub fn new(template: SynthConfig, n_subjects: usize, per_subject: usize) -> Self {
        Self {
            template,
            n_subjects,
            per_subject,
            dataset_id: "synth".into(),
            labeled: true,
            split_seed: template.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenerationManifest {
    spec: CorpusSpec,
    records: Vec<GeneratedRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeneratedRecord {
    record_id: String,
    subject_id: String,
    config: SynthConfig,
}

pub const GENERATION_FILE: &str = "synth.json";

/// Generates `n_subjects × per_subject` records into a canonical dataset at
/// `out_dir`, together with a subject split and nested label subsets.
pub fn synth_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    if spec.n_subjects < 3 {
        return Err(Error::Validation(format!(
            "a corpus needs at least 3 subjects for splitting, got {}",
            spec.n_subjects
        )));
    }
    spec.template.validate()?;
    let out_dir = out_dir.as_ref();
    let mut writer = DatasetWriter::create(
        out_dir,
        DatasetInfo {
            dataset_id: spec.dataset_id.clone(),
            label_type: if spec.labeled { LabelType::Integrated } else { LabelType::Unlabeled },
            official_split: false,
            adapter: "synth".into(),
        },
    )?;
    let mut generated = Vec::new();
    for subject in 0..spec.n_subjects {
        let subject_cfg = jitter_subject(&spec.template, spec.template.seed, subject);
        for index in 0..spec.per_subject {
            let mut cfg = subject_cfg;
            cfg.seed = mix(spec.template.seed, subject as u64, index as u64 + 1);
            let mut example = synth_record(&cfg)?;
            let subject_id = format!("s{subject:03}");
            let record_id = format!("{subject_id}_r{index:02}");
            example.record.record_id = record_id.clone();
            example.record.subject_id = subject_id.clone();
            example.record.dataset_id = spec.dataset_id.clone();
            if !spec.labeled {
                example.mask = None;
                example.intervals = None;
            }
            writer.add(&example)?;
            generated.push(GeneratedRecord {
                record_id,
                subject_id,
                config: cfg,
            });
        }
    }

    let subjects = generated
        .iter()
        .map(|g| format!("{}/{}", spec.dataset_id, g.subject_id))
        .collect();
    let mut split = subject_split(&subjects, (0.6, 0.2, 0.2), spec.split_seed)?;
    let train: Vec<String> = generated
        .iter()
        .filter(|g| split.split_of(&format!("{}/{}", spec.dataset_id, g.subject_id)) == Some(Split::Train))
        .map(|g| format!("{}/{}", spec.dataset_id, g.record_id))
        .collect();
    assign_label_subsets(&mut split, &train, spec.split_seed)?;

    let manifest = writer.finish(Some(&split))?;
    write_json(
        &out_dir.join(GENERATION_FILE),
        &GenerationManifest {
            spec: spec.clone(),
            records: generated,
        },
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beat_geometry_arithmetic() {
        let geo = SynthConfig::default().geometry().unwrap();
        // round(160·250/1000) = 40, round(90·250/1000) = round(22.5) = 23, round(380·250/1000) = 95
        assert_eq!(geo.qrs.onset_idx - geo.p.onset_idx, 40);
        assert_eq!(geo.qrs.len(), 23);
        assert_eq!(geo.t.offset_idx - geo.qrs.onset_idx + 1, 95);
        assert!(geo.p.offset_idx < geo.qrs.onset_idx && geo.qrs.offset_idx < geo.t.onset_idx);
    }

    #[test]
    fn clean_beat_is_deterministic_and_zero_outside_spans() {
        let cfg = SynthConfig::default();
        let a = synth_beat(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = synth_beat(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let (wave, spans) = a;
        for (i, v) in wave.iter().enumerate() {
            if !spans.iter().any(|s| (s.onset_idx..=s.offset_idx).contains(&i)) {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn zero_amplitudes_give_flat_beat() {
        let cfg = SynthConfig {
            p_amp_mv: 0.0,
            qrs_amp_mv: 0.0,
            t_amp_mv: 0.0,
            ..SynthConfig::default()
        };
        let (wave, spans) = synth_beat(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(wave.iter().all(|&v| v == 0.0));
        assert_eq!(spans[1].wave_class, WaveClass::Qrs);
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let cfg = SynthConfig {
            t_dur_ms: 350.0,
            ..SynthConfig::default()
        };
        assert!(cfg.geometry().is_err());
        let slow = SynthConfig {
            heart_rate_bpm: 120.0,
            ..SynthConfig::default()
        };
        assert!(slow.validate().is_err());
    }

    #[test]
    fn ten_beats_in_ten_seconds() {
        let ex = synth_record(&SynthConfig::default()).unwrap();
        assert_eq!(ex.record.samples.len(), 2500);
        let mask = ex.mask.unwrap();
        let qrs_runs = crate::eval::mask_runs(&mask)
            .into_iter()
            .filter(|s| s.wave_class == WaveClass::Qrs)
            .count();
        assert_eq!(qrs_runs, 10);
    }

    #[test]
    fn noise_never_edits_labels() {
        let clean = synth_record(&SynthConfig::default()).unwrap();
        let noisy = synth_record(&SynthConfig {
            noise_level: 0.5,
            baseline_wander_amp: 0.3,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!(clean.mask, noisy.mask);
        assert_ne!(clean.record.samples, noisy.record.samples);
    }

    #[test]
    fn jitter_stays_within_bounds() {
        let t = SynthConfig::default();
        for s in 0..50 {
            let c = jitter_subject(&t, 9, s);
            assert!((c.heart_rate_bpm / t.heart_rate_bpm - 1.0).abs() <= 0.1 + 1e-12);
            assert!((c.pr_ms - t.pr_ms).abs() <= 10.0);
            c.geometry().unwrap();
        }
    }
}
