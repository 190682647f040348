//! Rational-rate polyphase resampling with a Kaiser-windowed sinc filter.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const KAISER_BETA: f64 = 5.0;
const HALF_LEN_PER_RATE: usize = 10;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `fs_out / fs_in` as a reduced fraction `(up, down)`, at millihertz precision.
pub fn rate_fraction(fs_in: f64, fs_out: f64) -> (usize, usize) {
    let a = (fs_out * 1000.0).round() as u64;
    let b = (fs_in * 1000.0).round() as u64;
    let g = gcd(a, b).max(1);
    ((a / g) as usize, (b / g) as usize)
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Low-pass prototype with cutoff at `1 / max(up, down)` of the upsampled Nyquist rate.
fn design_filter(up: usize, down: usize) -> Vec<f64> {
    let rate = up.max(down);
    let half_len = HALF_LEN_PER_RATE * rate;
    let taps = 2 * half_len + 1;
    let cutoff = 1.0 / rate as f64;
    let i0_beta = bessel_i0(KAISER_BETA);
    (0..taps)
        .map(|k| {
            let t = k as f64 - half_len as f64;
            let r = 2.0 * k as f64 / (taps - 1) as f64 - 1.0;
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            cutoff * sinc(cutoff * t) * window
        })
        .collect()
}

/// Signal value with odd reflection about the end points outside `[0, n)`.
fn extended(x: &[f64], j: isize) -> f64 {
    let n = x.len() as isize;
    let clamp = |i: isize| i.clamp(0, n - 1) as usize;
    if j < 0 {
        2.0 * x[0] - x[clamp(-j)]
    } else if j >= n {
        2.0 * x[(n - 1) as usize] - x[clamp(2 * (n - 1) - j)]
    } else {
        x[j as usize]
    }
}

/// Output length `round(n · fs_out / fs_in)`.
pub fn resampled_len(n: usize, fs_in: f64, fs_out: f64) -> usize {
    (n as f64 * fs_out / fs_in).round() as usize
}

/// Anti-aliased downsampling from `fs_in` to `fs_out`. Every polyphase branch
/// is normalized to unit DC gain so constant signals are preserved exactly.
pub fn resample(samples: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if fs_in < fs_out {
        return Err(Error::Validation(format!(
            "upsampling from {fs_in} Hz to {fs_out} Hz is not supported"
        )));
    }
    if fs_in == fs_out || samples.is_empty() {
        return Ok(samples.to_vec());
    }
    let (up, down) = rate_fraction(fs_in, fs_out);
    let h = design_filter(up, down);
    let half_len = (h.len() - 1) / 2;
    let taps = h.len() as isize;

    let mut phase_sum = vec![0.0; up];
    for (k, &v) in h.iter().enumerate() {
        phase_sum[k % up] += v;
    }

    let n_out = resampled_len(samples.len(), fs_in, fs_out);
    let up_i = up as isize;
    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out {
        // Position in the upsampled grid, shifted to the filter centre.
        let t = (m * down + half_len) as isize;
        let j_hi = t.div_euclid(up_i);
        let j_lo = (t - taps + 1 + up_i - 1).div_euclid(up_i);
        let mut acc = 0.0;
        for j in j_lo..=j_hi {
            acc += extended(samples, j) * h[(t - j * up_i) as usize];
        }
        out.push(acc / phase_sum[(t.rem_euclid(up_i)) as usize]);
    }
    Ok(out)
}

/// Nearest-index resampling for categorical labels.
pub fn resample_mask(labels: &[u8], fs_in: f64, fs_out: f64) -> Result<Vec<u8>> {
    if fs_in < fs_out {
        return Err(Error::Validation(format!(
            "upsampling from {fs_in} Hz to {fs_out} Hz is not supported"
        )));
    }
    if fs_in == fs_out || labels.is_empty() {
        return Ok(labels.to_vec());
    }
    let n_out = resampled_len(labels.len(), fs_in, fs_out);
    let step = fs_in / fs_out;
    Ok((0..n_out)
        .map(|i| labels[((i as f64 * step).round() as usize).min(labels.len() - 1)])
        .collect())
}
