//! Weak (geometric, label-aware) and strong (signal-only) augmentations and
//! the RandAugment-style strong policy.
//!
//! Magnitudes are in post-z-score units.

use std::f64::consts::TAU;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakOp {
    RandomResizedCrop,
    HorizontalFlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongOp {
    PowerlineNoise,
    SineNoise,
    AmplitudeScale,
    WhiteNoise,
    BaselineShift,
}

impl StrongOp {
    pub fn name(self) -> &'static str {
        match self {
            StrongOp::PowerlineNoise => "powerline_noise",
            StrongOp::SineNoise => "sine_noise",
            StrongOp::AmplitudeScale => "amplitude_scale",
            StrongOp::WhiteNoise => "white_noise",
            StrongOp::BaselineShift => "baseline_shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub weak_ops: Vec<WeakOp>,
    pub strong_pool: Vec<StrongOp>,
    pub rand_n: usize,
    pub op_prob: f64,
    pub include_flip_in_weak: bool,
    pub include_baseline_shift_in_strong: bool,
    pub fs_hz: f64,
    pub crop_scale: (f64, f64),
    pub max_shift: f64,
    pub powerline_max_amp: f64,
    pub amplitude_range: (f64, f64),
    pub sine_freq_range: (f64, f64),
    pub sine_max_amp: f64,
    pub white_max_std: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            weak_ops: vec![WeakOp::RandomResizedCrop],
            strong_pool: vec![
                StrongOp::PowerlineNoise,
                StrongOp::SineNoise,
                StrongOp::AmplitudeScale,
                StrongOp::WhiteNoise,
            ],
            rand_n: 3,
            op_prob: 0.5,
            include_flip_in_weak: false,
            include_baseline_shift_in_strong: false,
            fs_hz: 250.0,
            crop_scale: (0.5, 1.0),
            max_shift: 0.5,
            powerline_max_amp: 0.3,
            amplitude_range: (0.5, 2.0),
            sine_freq_range: (0.5, 5.0),
            sine_max_amp: 0.3,
            white_max_std: 0.2,
        }
    }
}

impl AugmentPolicy {
    /// Weak ops in application order, including the ablation flip.
    pub fn effective_weak(&self) -> Vec<WeakOp> {
        let mut ops = self.weak_ops.clone();
        if self.include_flip_in_weak && !ops.contains(&WeakOp::HorizontalFlip) {
            ops.push(WeakOp::HorizontalFlip);
        }
        ops
    }

    pub fn effective_pool(&self) -> Vec<StrongOp> {
        let mut pool = self.strong_pool.clone();
        if self.include_baseline_shift_in_strong && !pool.contains(&StrongOp::BaselineShift) {
            pool.push(StrongOp::BaselineShift);
        }
        pool
    }

    pub fn validate(&self) -> Result<()> {
        let pool = self.effective_pool();
        if self.rand_n > pool.len() {
            return Err(Error::Config(format!(
                "rand_n = {} exceeds the strong pool size {}",
                self.rand_n,
                pool.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.op_prob) {
            return Err(Error::Config(format!("op_prob = {} is outside [0, 1]", self.op_prob)));
        }
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if self.amplitude_range.0 > self.amplitude_range.1 || self.sine_freq_range.0 > self.sine_freq_range.1 {
            return Err(Error::Config("augmentation ranges must be ordered (lo, hi)".into()));
        }
        if pool.contains(&StrongOp::PowerlineNoise) && !(self.fs_hz > 120.0) {
            return Err(Error::Config(format!("powerline noise needs fs > 120 Hz, got {}", self.fs_hz)));
        }
        if pool.contains(&StrongOp::SineNoise) && !(self.fs_hz > 2.0 * self.sine_freq_range.1) {
            return Err(Error::Config("sine noise frequency range exceeds Nyquist".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Source positions of a crop of `crop_len` samples starting at `start`,
/// stretched back to `len` samples.
pub fn crop_positions(len: usize, start: usize, crop_len: usize) -> Vec<f64> {
    if len < 2 {
        return vec![start as f64; len];
    }
    let step = (crop_len.max(1) - 1) as f64 / (len - 1) as f64;
    (0..len).map(|i| start as f64 + i as f64 * step).collect()
}

/// Linear interpolation of the signal and nearest-index lookup of the mask
/// at the same positions.
pub fn remap(x: &[f32], mask: &[u8], positions: &[f64]) -> (Vec<f32>, Vec<u8>) {
    let last = x.len() - 1;
    let xs = positions
        .iter()
        .map(|&p| {
            let i = (p.floor() as usize).min(last);
            let j = (i + 1).min(last);
            let w = p - i as f64;
            (x[i] as f64 * (1.0 - w) + x[j] as f64 * w) as f32
        })
        .collect();
    let ms = positions
        .iter()
        .map(|&p| mask[(p.round() as usize).min(last)])
        .collect();
    (xs, ms)
}

pub fn random_resized_crop<R: Rng + ?Sized>(
    x: &[f32],
    mask: &[u8],
    scale_range: (f64, f64),
    rng: &mut R,
) -> (Vec<f32>, Vec<u8>) {
    assert_eq!(x.len(), mask.len(), "signal and mask lengths differ");
    let len = x.len();
    if len < 2 {
        return (x.to_vec(), mask.to_vec());
    }
    let s = uniform(rng, scale_range.0, scale_range.1);
    let crop_len = ((len as f64 * s).round() as usize).clamp(2, len);
    let start = rng.random_range(0..=len - crop_len);
    remap(x, mask, &crop_positions(len, start, crop_len))
}

pub fn horizontal_flip(x: &[f32], mask: &[u8]) -> (Vec<f32>, Vec<u8>) {
    (x.iter().rev().copied().collect(), mask.iter().rev().copied().collect())
}

pub fn baseline_shift<R: Rng + ?Sized>(x: &[f32], rng: &mut R, max_shift: f64) -> Vec<f32> {
    let c = uniform(rng, -max_shift, max_shift);
    let n = x.len();
    let frac = uniform(rng, 0.2, 1.0);
    let seg = ((n as f64 * frac).round() as usize).clamp(1.min(n), n);
    let start = rng.random_range(0..=n - seg);
    x.iter()
        .enumerate()
        .map(|(i, &v)| if (start..start + seg).contains(&i) { (v as f64 + c) as f32 } else { v })
        .collect()
}

fn add_sine(x: &[f32], fs: f64, amp: f64, freq: f64, phase: f64) -> Vec<f32> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 + amp * (TAU * freq * i as f64 / fs + phase).sin()) as f32)
        .collect()
}

pub fn powerline_noise<R: Rng + ?Sized>(x: &[f32], fs: f64, rng: &mut R, max_amp: f64) -> Vec<f32> {
    let freq = if rng.random_bool(0.5) { 50.0 } else { 60.0 };
    let amp = uniform(rng, 0.0, max_amp);
    let phase = uniform(rng, 0.0, TAU);
    add_sine(x, fs, amp, freq, phase)
}

pub fn amplitude_scale<R: Rng + ?Sized>(x: &[f32], rng: &mut R, range: (f64, f64)) -> Vec<f32> {
    let g = uniform(rng, range.0, range.1);
    x.iter().map(|&v| (v as f64 * g) as f32).collect()
}

pub fn sine_noise<R: Rng + ?Sized>(x: &[f32], fs: f64, rng: &mut R, freq_range: (f64, f64), max_amp: f64) -> Vec<f32> {
    let amp = uniform(rng, 0.0, max_amp);
    let freq = uniform(rng, freq_range.0, freq_range.1);
    let phase = uniform(rng, 0.0, TAU);
    add_sine(x, fs, amp, freq, phase)
}

pub fn white_noise<R: Rng + ?Sized>(x: &[f32], rng: &mut R, max_std: f64) -> Vec<f32> {
    let sigma = uniform(rng, 0.0, max_std);
    if sigma == 0.0 {
        return x.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("finite std");
    x.iter().map(|&v| (v as f64 + normal.sample(rng)) as f32).collect()
}

pub fn apply_strong_op<R: Rng + ?Sized>(op: StrongOp, x: &[f32], policy: &AugmentPolicy, rng: &mut R) -> Vec<f32> {
    match op {
        StrongOp::PowerlineNoise => powerline_noise(x, policy.fs_hz, rng, policy.powerline_max_amp),
        StrongOp::SineNoise => sine_noise(x, policy.fs_hz, rng, policy.sine_freq_range, policy.sine_max_amp),
        StrongOp::AmplitudeScale => amplitude_scale(x, rng, policy.amplitude_range),
        StrongOp::WhiteNoise => white_noise(x, rng, policy.white_max_std),
        StrongOp::BaselineShift => baseline_shift(x, rng, policy.max_shift),
    }
}

/// Which weak ops fire for one sample. The crop is never subject to `op_prob`.
pub fn draw_weak<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> Vec<(WeakOp, bool)> {
    policy
        .effective_weak()
        .into_iter()
        .map(|op| {
            let fires = match op {
                WeakOp::RandomResizedCrop => true,
                WeakOp::HorizontalFlip => rng.random_bool(policy.op_prob),
            };
            (op, fires)
        })
        .collect()
}

/// `rand_n` distinct ops in drawn order, each paired with whether it fires.
pub fn draw_strong<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> Vec<(StrongOp, bool)> {
    let pool = policy.effective_pool();
    let n = policy.rand_n.min(pool.len());
    index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| (pool[i], rng.random_bool(policy.op_prob)))
        .collect()
}

pub fn apply_weak<R: Rng + ?Sized>(x: &[f32], mask: &[u8], policy: &AugmentPolicy, rng: &mut R) -> (Vec<f32>, Vec<u8>) {
    let plan = draw_weak(policy, rng);
    let (mut xs, mut ms) = (x.to_vec(), mask.to_vec());
    for (op, fires) in plan {
        if !fires {
            continue;
        }
        (xs, ms) = match op {
            WeakOp::RandomResizedCrop => random_resized_crop(&xs, &ms, policy.crop_scale, rng),
            WeakOp::HorizontalFlip => horizontal_flip(&xs, &ms),
        };
    }
    (xs, ms)
}

/// Strong ops never see the mask.
pub fn apply_strong<R: Rng + ?Sized>(x: &[f32], policy: &AugmentPolicy, rng: &mut R) -> Vec<f32> {
    let plan = draw_strong(policy, rng);
    let mut xs = x.to_vec();
    for (op, fires) in plan {
        if fires {
            xs = apply_strong_op(op, &xs, policy, rng);
        }
    }
    xs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn crop_at_full_scale_is_identity() {
        let x: Vec<f32> = (0..300).map(|i| (i as f32 * 0.1).sin()).collect();
        let m: Vec<u8> = (0..300).map(|i| (i / 40 % 4) as u8).collect();
        let (y, n) = random_resized_crop(&x, &m, (1.0, 1.0), &mut rng());
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-9));
        assert_eq!(m, n);
    }

    #[test]
    fn half_crop_doubles_runs() {
        let mut m = vec![0u8; 2500];
        m[100..200].iter_mut().for_each(|v| *v = 2);
        let x = vec![0.0f32; 2500];
        let (_, out) = remap(&x, &m, &crop_positions(2500, 0, 1250));
        let run = out.iter().filter(|&&v| v == 2).count();
        assert!((run as i64 - 200).abs() <= 2, "{run}");
    }

    #[test]
    fn flip_is_an_involution() {
        let x = vec![1.0, 2.0, 3.0];
        let m = vec![1u8, 2, 3];
        let (fx, fm) = horizontal_flip(&x, &m);
        assert_eq!((fm.clone(), fx.clone()), (vec![3, 2, 1], vec![3.0, 2.0, 1.0]));
        assert_eq!(horizontal_flip(&fx, &fm), (x, m));
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let x: Vec<f32> = (0..500).map(|i| i as f32 * 0.01).collect();
        assert_eq!(baseline_shift(&x, &mut rng(), 0.0), x);
        assert_eq!(powerline_noise(&x, 250.0, &mut rng(), 0.0), x);
        assert_eq!(amplitude_scale(&x, &mut rng(), (1.0, 1.0)), x);
        assert_eq!(sine_noise(&x, 250.0, &mut rng(), (0.5, 5.0), 0.0), x);
        assert_eq!(white_noise(&x, &mut rng(), 0.0), x);
    }

    #[test]
    fn amplitude_scale_ratio_is_constant() {
        let x: Vec<f32> = (1..200).map(|i| i as f32).collect();
        let y = amplitude_scale(&x, &mut rng(), (0.5, 2.0));
        let g = y[0] / x[0];
        assert!(x.iter().zip(&y).all(|(a, b)| (b / a - g).abs() < 1e-5));
        assert!(amplitude_scale(&[0.0; 5], &mut rng(), (0.5, 2.0)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_policies() {
        let x: Vec<f32> = (0..100).map(|i| i as f32).collect();
        let off = AugmentPolicy {
            op_prob: 0.0,
            ..AugmentPolicy::default()
        };
        let mut r = rng();
        for _ in 0..20 {
            assert_eq!(apply_strong(&x, &off, &mut r), x);
        }
        let scale_only = AugmentPolicy {
            op_prob: 1.0,
            strong_pool: vec![StrongOp::AmplitudeScale],
            rand_n: 1,
            ..AugmentPolicy::default()
        };
        let y = apply_strong(&x, &scale_only, &mut r);
        let g = y[1] / x[1];
        assert!(x.iter().zip(&y).skip(1).all(|(a, b)| (b / a - g).abs() < 1e-5));
    }

    #[test]
    fn default_weak_plan_is_one_crop() {
        let plan = draw_weak(&AugmentPolicy::default(), &mut rng());
        assert_eq!(plan, vec![(WeakOp::RandomResizedCrop, true)]);
    }

    #[test]
    fn policy_validation() {
        let bad = AugmentPolicy {
            rand_n: 5,
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
        let ok = AugmentPolicy {
            rand_n: 5,
            include_baseline_shift_in_strong: true,
            ..AugmentPolicy::default()
        };
        ok.validate().unwrap();
    }
}
