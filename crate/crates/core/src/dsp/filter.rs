//! Butterworth band-pass design (bilinear transform, second-order sections)
//! and zero-phase forward-backward filtering.

use std::f64::consts::PI;

/// One biquad: `b0 + b1 z^-1 + b2 z^-2` over `1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Complex {
    re: f64,
    im: f64,
}

impl Complex {
    fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im - o.im)
    }
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
    fn scale(self, k: f64) -> Self {
        Self::new(self.re * k, self.im * k)
    }
    fn div(self, o: Self) -> Self {
        let d = o.re * o.re + o.im * o.im;
        Self::new((self.re * o.re + self.im * o.im) / d, (self.im * o.re - self.re * o.im) / d)
    }
    fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }
    fn sqrt(self) -> Self {
        let r = self.abs();
        let re = ((r + self.re) / 2.0).max(0.0).sqrt();
        let im = ((r - self.re) / 2.0).max(0.0).sqrt();
        Self::new(re, if self.im < 0.0 { -im } else { im })
    }
    fn expj(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }
}

/// Butterworth band-pass of prototype order `order` (filter order `2·order`)
/// as cascaded biquads, normalized to unit gain at the geometric band centre.
pub fn butter_bandpass(order: usize, lo_hz: f64, hi_hz: f64, fs: f64) -> Vec<Biquad> {
    assert!(order > 0 && 0.0 < lo_hz && lo_hz < hi_hz && hi_hz < fs / 2.0);
    let fs2 = 2.0 * fs;
    let w_lo = fs2 * (PI * lo_hz / fs).tan();
    let w_hi = fs2 * (PI * hi_hz / fs).tan();
    let bw = w_hi - w_lo;
    let w0 = (w_lo * w_hi).sqrt();

    // Analog low-pass prototype poles on the left half of the unit circle.
    let n = order as f64;
    let proto: Vec<Complex> = (0..order)
        .map(|k| {
            let m = -(n - 1.0) + 2.0 * k as f64;
            Complex::expj(PI * m / (2.0 * n)).scale(-1.0)
        })
        .collect();

    // Low-pass to band-pass: each prototype pole splits into two.
    let w0_sq = Complex::new(w0 * w0, 0.0);
    let mut digital = Vec::with_capacity(2 * order);
    for p in proto {
        let half = p.scale(bw / 2.0);
        let disc = half.mul(half).sub(w0_sq).sqrt();
        for s in [half.add(disc), half.sub(disc)] {
            // Bilinear transform.
            let fs2c = Complex::new(fs2, 0.0);
            digital.push(fs2c.add(s).div(fs2c.sub(s)));
        }
    }

    let mut complex: Vec<Complex> = digital.iter().copied().filter(|p| p.im > 1e-12).collect();
    let mut real: Vec<f64> = digital
        .iter()
        .filter(|p| p.im.abs() <= 1e-12)
        .map(|p| p.re)
        .collect();
    complex.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    real.sort_by(f64::total_cmp);

    // Band-pass zeros: `order` at z = 1 and `order` at z = -1, one of each per section.
    let mut sections: Vec<Biquad> = complex
        .iter()
        .map(|p| Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * p.re, p.re * p.re + p.im * p.im],
        })
        .collect();
    for pair in real.chunks(2) {
        let (r1, r2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -(r1 + r2), r1 * r2],
        });
    }

    let omega0 = 2.0 * (w0 / fs2).atan();
    let gain = cascade_response(&sections, omega0);
    sections[0].b.iter_mut().for_each(|b| *b /= gain);
    sections
}

/// |H(e^{jω})| of a biquad cascade.
pub fn cascade_response(sections: &[Biquad], omega: f64) -> f64 {
    let z1 = Complex::expj(-omega);
    let z2 = z1.mul(z1);
    sections
        .iter()
        .map(|s| {
            let num = Complex::new(s.b[0], 0.0).add(z1.scale(s.b[1])).add(z2.scale(s.b[2]));
            let den = Complex::new(s.a[0], 0.0).add(z1.scale(s.a[1])).add(z2.scale(s.a[2]));
            num.div(den).abs()
        })
        .product()
}

/// Steady-state transposed-direct-form-II states for a unit step input.
fn step_states(sections: &[Biquad]) -> Vec<[f64; 2]> {
    let mut level = 1.0;
    sections
        .iter()
        .map(|s| {
            let gain = (s.b[0] + s.b[1] + s.b[2]) / (s.a[0] + s.a[1] + s.a[2]);
            let y = gain * level;
            let z2 = s.b[2] * level - s.a[2] * y;
            let z1 = s.b[1] * level - s.a[1] * y + z2;
            level = y;
            [z1, z2]
        })
        .collect()
}

fn cascade_filter(sections: &[Biquad], x: &mut [f64], zi: &[[f64; 2]], scale: f64) {
    for (s, z0) in sections.iter().zip(zi) {
        let (mut z1, mut z2) = (z0[0] * scale, z0[1] * scale);
        for v in x.iter_mut() {
            let input = *v;
            let y = s.b[0] * input + z1;
            z1 = s.b[1] * input - s.a[1] * y + z2;
            z2 = s.b[2] * input - s.a[2] * y;
            *v = y;
        }
    }
}

/// Zero-phase filtering: odd extension at both ends, steady-state initial
/// conditions, then forward and backward passes.
pub fn sosfiltfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let padlen = (3 * (2 * sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    let (first, last) = (x[0], x[n - 1]);
    ext.extend((1..=padlen).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=padlen).map(|i| 2.0 * last - x[n - 1 - i]));

    let zi = step_states(sections);
    let x0 = ext[0];
    cascade_filter(sections, &mut ext, &zi, x0);
    ext.reverse();
    let y0 = ext[0];
    cascade_filter(sections, &mut ext, &zi, y0);
    ext.reverse();
    ext[padlen..padlen + n].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_gain_at_centre_and_zero_at_dc() {
        let sos = butter_bandpass(3, 0.67, 40.0, 250.0);
        assert_eq!(sos.len(), 3);
        assert!(cascade_response(&sos, 0.0) < 1e-12);
        assert!(cascade_response(&sos, PI) < 1e-12);
        let centre = 2.0 * PI * 10.0 / 250.0;
        assert!((cascade_response(&sos, centre) - 1.0).abs() < 0.01);
    }

    #[test]
    fn half_power_at_band_edges() {
        let sos = butter_bandpass(3, 0.67, 40.0, 250.0);
        for f in [0.67, 40.0] {
            let g = cascade_response(&sos, 2.0 * PI * f / 250.0);
            assert!((g - 0.5f64.sqrt()).abs() < 1e-6, "gain {g} at {f} Hz");
        }
    }

    #[test]
    fn constant_input_filters_to_zero() {
        let sos = butter_bandpass(3, 0.67, 40.0, 250.0);
        let y = sosfiltfilt(&sos, &vec![3.0; 500]);
        assert!(y.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn stable_poles() {
        for s in butter_bandpass(3, 0.67, 40.0, 250.0) {
            // |a2| < 1 and |a1| < 1 + a2 for a stable biquad.
            assert!(s.a[2].abs() < 1.0 && s.a[1].abs() < 1.0 + s.a[2]);
        }
    }
}
