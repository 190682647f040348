//! Preprocessing chain: fixed-length windowing, downsampling, band-pass
//! filtering and z-score normalization. Masks follow the signal in lockstep.

mod filter;
mod resample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DelineationMask, LabeledExample, ReferenceIntervals, BACKGROUND};

pub use filter::{butter_bandpass, cascade_response, sosfiltfilt, Biquad};
pub use resample::{rate_fraction, resample, resample_mask, resampled_len};

/// Butterworth prototype order of the band-pass filter.
pub const BANDPASS_ORDER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_fs_hz: f64,
    pub window_s: f64,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub eps: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_fs_hz: 250.0,
            window_s: 10.0,
            band_lo_hz: 0.67,
            band_hi_hz: 40.0,
            eps: 1e-8,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.band_lo_hz && self.band_lo_hz < self.band_hi_hz && self.band_hi_hz < self.target_fs_hz / 2.0) {
            return Err(Error::Config(format!(
                "band edges must satisfy 0 < {} < {} < {}",
                self.band_lo_hz,
                self.band_hi_hz,
                self.target_fs_hz / 2.0
            )));
        }
        if !(self.window_s > 0.0 && self.eps > 0.0) {
            return Err(Error::Config("window_s and eps must be positive".into()));
        }
        Ok(())
    }

    /// Samples per window at the target rate.
    pub fn target_len(&self) -> usize {
        (self.window_s * self.target_fs_hz).round() as usize
    }
}

/// A preprocessed single-lead example ready for model input.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    /// `dataset_id/record_id/lead_id`.
    pub key: String,
    pub dataset_id: String,
    pub signal: Vec<f32>,
    pub mask: Option<Vec<u8>>,
    /// Samples before the zero padding starts.
    pub valid_len: usize,
    pub intervals: Option<ReferenceIntervals>,
}

/// Crops (keeping the head) or zero-pads to `round(window_s · at_fs)` samples.
/// Returns the example and the number of unpadded samples.
pub fn fix_length(example: &LabeledExample, window_s: f64, at_fs: f64) -> (LabeledExample, usize) {
    let target = (window_s * at_fs).round() as usize;
    let n = example.record.samples.len();
    let valid_len = n.min(target);
    let mut out = example.clone();
    out.record.samples.resize(target, 0.0);
    if let Some(mask) = &example.mask {
        let mut labels = mask.labels().to_vec();
        labels.resize(target, BACKGROUND);
        out.mask = Some(DelineationMask::new(labels).expect("labels come from a valid mask"));
    }
    (out, valid_len)
}

/// Zero-phase Butterworth band-pass.
pub fn bandpass(samples: &[f64], fs: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(fs > 2.0 * hi) || !(0.0 < lo && lo < hi) {
        return Err(Error::Validation(format!(
            "band-pass [{lo}, {hi}] Hz is not realizable at {fs} Hz"
        )));
    }
    let sos = butter_bandpass(BANDPASS_ORDER, lo, hi, fs);
    Ok(sosfiltfilt(&sos, samples))
}

/// Normalizes the first `valid_len` samples to zero mean and unit variance
/// and zeroes the remainder.
pub fn zscore(samples: &[f64], valid_len: usize, eps: f64) -> Vec<f64> {
    let valid_len = valid_len.min(samples.len());
    let valid = &samples[..valid_len];
    let n = valid_len.max(1) as f64;
    let mean = valid.iter().sum::<f64>() / n;
    let var = valid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    let mut out: Vec<f64> = valid.iter().map(|v| (v - mean) / denom).collect();
    out.resize(samples.len(), 0.0);
    out
}

/// Full chain in order: fix length at the native rate, resample signal and
/// mask, band-pass, z-score. Returns the example and its valid length.
pub fn preprocess(example: &LabeledExample, config: &PreprocessConfig) -> Result<(LabeledExample, usize)> {
    example.validate()?;
    config.validate()?;
    let fs_in = example.record.fs_hz;
    let fs_out = config.target_fs_hz;
    let (fixed, valid_native) = fix_length(example, config.window_s, fs_in);

    let x: Vec<f64> = fixed.record.samples.iter().map(|&v| v as f64).collect();
    let mut x = resample(&x, fs_in, fs_out)?;
    let mut mask = fixed
        .mask
        .as_ref()
        .map(|m| resample_mask(m.labels(), fs_in, fs_out))
        .transpose()?;

    // Rounding of the native window length can leave the resampled signal
    // one sample off the target.
    let target = config.target_len();
    x.resize(target, 0.0);
    if let Some(m) = mask.as_mut() {
        m.resize(target, BACKGROUND);
    }
    let valid_len = resampled_len(valid_native, fs_in, fs_out).min(target);

    let filtered = bandpass(&x, fs_out, config.band_lo_hz, config.band_hi_hz)?;
    let normalized = zscore(&filtered, valid_len, config.eps);

    let mut out = fixed;
    out.record.fs_hz = fs_out;
    out.record.samples = normalized.iter().map(|&v| v as f32).collect();
    out.mask = mask.map(DelineationMask::new).transpose()?;
    Ok((out, valid_len))
}

/// Preprocesses one example into model-ready form.
pub fn prepare(example: &LabeledExample, config: &PreprocessConfig) -> Result<PreparedExample> {
    let (out, valid_len) = preprocess(example, config)?;
    Ok(PreparedExample {
        key: format!("{}/{}", out.record.qualified_id(), out.record.lead_id),
        dataset_id: out.record.dataset_id.clone(),
        signal: out.record.samples,
        mask: out.mask.map(DelineationMask::into_labels),
        valid_len,
        intervals: out.intervals,
    })
}
