//! Signal preprocessing: Butterworth band-pass, symmetric time cropping and
//! constant amplitude scaling.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Sinogram;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandpassSpec {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    /// Order of each of the high-pass and low-pass Butterworth halves.
    pub order: usize,
    pub zero_phase: bool,
}

impl Default for BandpassSpec {
    fn default() -> Self {
        BandpassSpec {
            low_cut_hz: 500e3,
            high_cut_hz: 10e6,
            order: 3,
            zero_phase: true,
        }
    }
}

impl BandpassSpec {
    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        let nyquist = 0.5 * sample_rate_hz;
        if !(self.low_cut_hz > 0.0 && self.low_cut_hz < self.high_cut_hz) {
            return Err(Error::Config(format!(
                "band-pass cutoffs must satisfy 0 < low < high, got {} / {}",
                self.low_cut_hz, self.high_cut_hz
            )));
        }
        if self.high_cut_hz >= nyquist {
            return Err(Error::Config(format!(
                "high cutoff {} Hz is not below Nyquist {} Hz",
                self.high_cut_hz, nyquist
            )));
        }
        if self.order == 0 || self.order > 8 {
            return Err(Error::Config(format!("filter order must be in 1..=8, got {}", self.order)));
        }
        Ok(())
    }
}

/// Second-order section `(b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let num = self.b[0] + z_inv * (self.b[1] + z_inv * self.b[2]);
        let den = 1.0 + z_inv * (self.a[0] + z_inv * self.a[1]);
        num / den
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct-form-II state reached after a unit step.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        [g - self.b[0], self.b[2] - self.a[1] * g]
    }

    fn run(&self, x: &mut [f64], mut state: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + state[0];
            state[0] = b1 * input - a1 * y + state[1];
            state[1] = b2 * input - a2 * y;
            *v = y;
        }
    }
}

/// Cascade of biquads with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
    pub sample_rate_hz: f64,
    pub order: usize,
}

#[derive(Clone, Copy)]
enum Kind {
    Low,
    High,
}

fn butterworth_sections(order: usize, cutoff_hz: f64, fs: f64, kind: Kind) -> Vec<Biquad> {
    let warped = 2.0 * fs * (std::f64::consts::PI * cutoff_hz / fs).tan();
    let bilinear = |s: Complex64| (2.0 * fs + s) / (2.0 * fs - s);
    let (zero, reference) = match kind {
        Kind::Low => (-1.0, Complex64::new(1.0, 0.0)),
        Kind::High => (1.0, Complex64::new(-1.0, 0.0)),
    };
    let mut sections = Vec::new();
    // upper-half-plane prototype poles pair with their conjugates
    for k in 0..order {
        let theta = std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        if proto.im < -1e-12 {
            continue;
        }
        let analog = match kind {
            Kind::Low => proto * warped,
            Kind::High => warped / proto,
        };
        let p = bilinear(analog);
        let mut sec = if proto.im.abs() <= 1e-12 {
            Biquad {
                b: [1.0, -zero, 0.0],
                a: [-p.re, 0.0],
            }
        } else {
            Biquad {
                b: [1.0, -2.0 * zero, zero * zero],
                a: [-2.0 * p.re, p.norm_sqr()],
            }
        };
        let g = sec.response(reference.inv()).norm();
        for b in sec.b.iter_mut() {
            *b /= g;
        }
        sections.push(sec);
    }
    sections
}

/// High-pass then low-pass Butterworth cascade for `spec`.
pub fn design_bandpass(spec: &BandpassSpec, sample_rate_hz: f64) -> Result<SosFilter> {
    spec.validate(sample_rate_hz)?;
    let mut sections = butterworth_sections(spec.order, spec.low_cut_hz, sample_rate_hz, Kind::High);
    sections.extend(butterworth_sections(spec.order, spec.high_cut_hz, sample_rate_hz, Kind::Low));
    Ok(SosFilter {
        sections,
        sample_rate_hz,
        order: spec.order,
    })
}

impl SosFilter {
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = std::f64::consts::TAU * freq_hz / self.sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    /// Amplitude gain of one pass, or of the forward–backward pair.
    pub fn gain(&self, freq_hz: f64, zero_phase: bool) -> f64 {
        let g = self.response(freq_hz).norm();
        if zero_phase {
            g * g
        } else {
            g
        }
    }

    /// Single causal pass started from the steady state of `x[0]`.
    pub fn filter_in_place(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut level = x0;
        for sec in &self.sections {
            let st = sec.step_state();
            sec.run(x, [st[0] * level, st[1] * level]);
            level *= sec.dc_gain();
        }
    }

    /// Samples after which the slowest pole's envelope has fallen below
    /// `tol`. Boundary transients of [`filtfilt`](Self::filtfilt) last about
    /// this long, so cropping and filtering commute only further inside.
    pub fn settle_len(&self, tol: f64) -> usize {
        let slowest = self
            .sections
            .iter()
            .map(|s| {
                if s.a[1] > 0.0 {
                    s.a[1].sqrt()
                } else {
                    s.a[0].abs()
                }
            })
            .fold(0.0f64, f64::max);
        if slowest <= 0.0 {
            return 0;
        }
        (tol.ln() / slowest.ln()).ceil() as usize
    }

    /// Reflect-padding length used by [`filtfilt`](Self::filtfilt).
    pub fn pad_len(&self) -> usize {
        3 * self.order
    }

    /// Forward–backward filtering with odd reflection at both ends.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = self.pad_len().min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.filter_in_place(&mut ext);
        ext.reverse();
        self.filter_in_place(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }

    pub fn apply(&self, x: &[f64], zero_phase: bool) -> Vec<f64> {
        if zero_phase {
            self.filtfilt(x)
        } else {
            let mut y = x.to_vec();
            self.filter_in_place(&mut y);
            y
        }
    }
}

/// Band-pass filters every channel independently.
pub fn bandpass(s: &Sinogram, spec: &BandpassSpec) -> Result<Sinogram> {
    let filter = design_bandpass(spec, s.sample_rate_hz())?;
    let (n_d, n_t) = s.shape();
    let mut out = Array2::zeros((n_d, n_t));
    for (d, mut row) in out.outer_iter_mut().enumerate() {
        let x = s.channel(d).to_vec();
        let y = filter.apply(&x, spec.zero_phase);
        row.iter_mut().zip(y).for_each(|(o, v)| *o = v);
    }
    s.with_data(out)
}

/// `(leading, trailing)` samples removed when cropping `n` to `target`.
pub fn crop_split(n: usize, target: usize) -> (usize, usize) {
    let excess = n - target;
    (excess / 2, excess - excess / 2)
}

/// Symmetric crop to `target_samples`, which must be a multiple of 16.
pub fn crop_time(s: &Sinogram, target_samples: usize) -> Result<Sinogram> {
    if target_samples == 0 || !target_samples.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "crop target {target_samples} is not a positive multiple of 16"
        )));
    }
    if target_samples > s.n_samples() {
        return Err(Error::Shape(format!(
            "crop target {target_samples} exceeds {} samples",
            s.n_samples()
        )));
    }
    let (lead, _) = crop_split(s.n_samples(), target_samples);
    s.with_data(s.data().slice(ndarray::s![.., lead..lead + target_samples]).to_owned())
}

/// Default network input scale.
pub const INPUT_SCALE: f64 = 0.004;

pub fn scale(s: &Sinogram, factor: f64) -> Result<Sinogram> {
    if factor == 0.0 || !factor.is_finite() {
        return Err(Error::Config(format!("scale factor must be finite and non-zero, got {factor}")));
    }
    s.with_data(s.data() * factor)
}

pub fn unscale(s: &Sinogram, factor: f64) -> Result<Sinogram> {
    if factor == 0.0 || !factor.is_finite() {
        return Err(Error::Config(format!("scale factor must be finite and non-zero, got {factor}")));
    }
    s.with_data(s.data() / factor)
}

/// Band-pass then crop, the preprocessing applied to every sinogram.
pub fn preprocess(s: &Sinogram, spec: &BandpassSpec, target_samples: usize) -> Result<Sinogram> {
    crop_time(&bandpass(s, spec)?, target_samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 40e6;

    fn tone(freq: f64, n: usize) -> Vec<f64> {
        (0..n).map(|t| (std::f64::consts::TAU * freq * t as f64 / FS).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn steady_gain(freq: f64) -> f64 {
        let n = 8192;
        let x = tone(freq, n);
        let f = design_bandpass(&BandpassSpec::default(), FS).unwrap();
        let y = f.filtfilt(&x);
        let mid = n / 4..3 * n / 4;
        rms(&y[mid.clone()]) / rms(&x[mid])
    }

    #[test]
    fn designed_response_matches_butterworth_magnitude() {
        let spec = BandpassSpec::default();
        let f = design_bandpass(&spec, FS).unwrap();
        assert_eq!(f.sections.len(), 4);
        // analog Butterworth magnitude after frequency pre-warping
        let warp = |hz: f64| (std::f64::consts::PI * hz / FS).tan();
        for hz in [2e5, 1e6, 4e6, 9e6, 1.5e7] {
            let hp = 1.0 / (1.0 + (warp(spec.low_cut_hz) / warp(hz)).powi(6)).sqrt();
            let lp = 1.0 / (1.0 + (warp(hz) / warp(spec.high_cut_hz)).powi(6)).sqrt();
            let g = f.gain(hz, false);
            assert!((g - hp * lp).abs() < 1e-12, "{hz}: {g} vs {}", hp * lp);
        }
    }

    #[test]
    fn dc_is_rejected() {
        let s = Sinogram::new(Array2::ones((2, 512)), FS).unwrap();
        let y = bandpass(&s, &BandpassSpec::default()).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 0.01));
    }

    #[test]
    fn passband_tone_gain() {
        let g = steady_gain(4e6);
        let f = design_bandpass(&BandpassSpec::default(), FS).unwrap();
        assert!((0.95..=1.05).contains(&g), "{g}");
        assert!((g - f.gain(4e6, true)).abs() < 1e-3);
    }

    #[test]
    fn low_frequency_tone_is_rejected() {
        let g = steady_gain(100e3);
        assert!(g < 0.05, "{g}");
    }

    #[test]
    fn nyquist_cutoff_is_an_error() {
        let spec = BandpassSpec {
            high_cut_hz: 20e6,
            ..Default::default()
        };
        assert!(bandpass(&Sinogram::zeros(1, 32, FS), &spec).is_err());
    }

    #[test]
    fn filtering_is_linear() {
        let mut rng = crate::rng::seeded_rng(crate::rng::RngSeed(4), "dsp");
        let x = Array2::from_shape_simple_fn((3, 300), || rng.normal());
        let y = Array2::from_shape_simple_fn((3, 300), || rng.normal());
        let (a, b) = (0.7, -2.0);
        let sx = Sinogram::new(x.clone(), FS).unwrap();
        let sy = Sinogram::new(y.clone(), FS).unwrap();
        let sxy = Sinogram::new(&x * a + &y * b, FS).unwrap();
        let spec = BandpassSpec::default();
        let lhs = bandpass(&sxy, &spec).unwrap().into_data();
        let rhs = bandpass(&sx, &spec).unwrap().into_data() * a + bandpass(&sy, &spec).unwrap().into_data() * b;
        let err = (&lhs - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-12 * scale, "{err}");
    }

    #[test]
    fn zero_phase_keeps_pulse_peak() {
        let n = 1024;
        let centre = 500.0;
        let x: Vec<f64> = (0..n)
            .map(|t| {
                let u = (t as f64 - centre) / 12.0;
                (-0.5 * u * u).exp() * (std::f64::consts::TAU * 3e6 * (t as f64 - centre) / FS).cos()
            })
            .collect();
        let f = design_bandpass(&BandpassSpec::default(), FS).unwrap();
        let y = f.filtfilt(&x);
        let peak = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
        assert!((peak(&y) as i64 - peak(&x) as i64).abs() <= 1);
    }

    #[test]
    fn crop_and_filter_commute_away_from_edges() {
        let mut rng = crate::rng::seeded_rng(crate::rng::RngSeed(1), "commute");
        let x: Vec<f64> = (0..1200).map(|_| rng.normal()).collect();
        let f = design_bandpass(&BandpassSpec::default(), FS).unwrap();
        let full = f.filtfilt(&x);
        let (a, b) = (100, 1100);
        let cropped = f.filtfilt(&x[a..b]);
        let scale = full.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let settle = f.settle_len(1e-3);
        // the 500 kHz high-pass has the slowest pole; ~170 samples at 40 MHz
        assert!((150..200).contains(&settle), "{settle}");
        for k in settle..(b - a - settle) {
            assert!((cropped[k] - full[a + k]).abs() < 1e-3 * scale, "k={k}");
        }
        // right at the edges the two orders do differ
        assert!((cropped[0] - full[a]).abs() > 1e-3 * scale);
    }

    #[test]
    fn crop_rules() {
        let s = Sinogram::new(Array2::from_shape_fn((2, 1816), |(_, t)| t as f64), FS).unwrap();
        let c = crop_time(&s, 1808).unwrap();
        assert_eq!(c.n_samples(), 1808);
        assert_eq!(c.data()[[0, 0]], 4.0);
        assert_eq!(c.data()[[0, 1807]], 1811.0);
        assert_eq!(crop_split(1817, 1808), (4, 5));
        let same = Sinogram::zeros(2, 256, FS);
        assert_eq!(crop_time(&same, 256).unwrap(), same);
        assert!(matches!(crop_time(&s, 250), Err(Error::Config(_))));
    }

    #[test]
    fn scale_rules() {
        let s = Sinogram::new(Array2::from_elem((1, 2), 250.0), FS).unwrap();
        let scaled = scale(&s, INPUT_SCALE).unwrap();
        assert!((scaled.data()[[0, 0]] - 1.0).abs() < 1e-15);
        assert_eq!(scale(&s, 1.0).unwrap(), s);
        assert!(scale(&s, 0.0).is_err());
        let mut rng = crate::rng::seeded_rng(crate::rng::RngSeed(2), "scale");
        let r = Sinogram::new(Array2::from_shape_simple_fn((4, 64), || rng.normal() * 300.0), FS).unwrap();
        let back = unscale(&scale(&r, INPUT_SCALE).unwrap(), INPUT_SCALE).unwrap();
        for (a, b) in back.data().iter().zip(r.data().iter()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }
}
