//! Electrical noise: white thermal noise, burst-like parasitic
//! interference, and loading of measured noise sinograms.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded_rng, OaRng, RngSeed};
use crate::types::Sinogram;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThermalNoiseSpec {
    pub sigma: f64,
}

impl Default for ThermalNoiseSpec {
    fn default() -> Self {
        ThermalNoiseSpec { sigma: 0.25 }
    }
}

impl ThermalNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("thermal sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Number of parasitic bursts per sinogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum BurstCount {
    Fixed(usize),
    Poisson(f64),
}

impl BurstCount {
    fn draw(&self, rng: &mut OaRng) -> usize {
        match *self {
            BurstCount::Fixed(n) => n,
            BurstCount::Poisson(mean) => rng.poisson(mean),
        }
    }
}

/// Damped-sinusoid bursts replicated over contiguous transducer blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParasiticNoiseSpec {
    pub bursts: BurstCount,
    pub carrier_freq_hz: [f64; 2],
    pub decay_time_s: [f64; 2],
    pub amplitude: [f64; 2],
    pub block_size: [usize; 2],
    /// onset shift added per transducer step inside a block
    pub channel_delay_samples: [i64; 2],
    /// per-channel gain drawn from `1 ± jitter`
    pub channel_gain_jitter: f64,
}

impl Default for ParasiticNoiseSpec {
    fn default() -> Self {
        ParasiticNoiseSpec {
            bursts: BurstCount::Poisson(4.0),
            carrier_freq_hz: [1.0e6, 8.0e6],
            decay_time_s: [0.3e-6, 2.0e-6],
            amplitude: [0.3, 1.0],
            block_size: [4, 32],
            channel_delay_samples: [-2, 2],
            channel_gain_jitter: 0.1,
        }
    }
}

impl ParasiticNoiseSpec {
    /// No bursts at all.
    pub fn silent() -> Self {
        ParasiticNoiseSpec {
            bursts: BurstCount::Fixed(0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("parasitic noise: {what}")));
        if let BurstCount::Poisson(m) = self.bursts {
            if !(m >= 0.0 && m.is_finite()) {
                return bad("burst mean must be >= 0");
            }
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !(ordered(self.carrier_freq_hz) && self.carrier_freq_hz[0] > 0.0) {
            return bad("carrier frequency range must be positive and ordered");
        }
        if !(ordered(self.decay_time_s) && self.decay_time_s[0] > 0.0) {
            return bad("decay time range must be positive and ordered");
        }
        if !(ordered(self.amplitude) && self.amplitude[0] >= 0.0) {
            return bad("amplitude range must be nonnegative and ordered");
        }
        if self.block_size[0] == 0 || self.block_size[0] > self.block_size[1] {
            return bad("block size range must be positive and ordered");
        }
        if self.channel_delay_samples[0] > self.channel_delay_samples[1] {
            return bad("channel delay range must be ordered");
        }
        if !(0.0..1.0).contains(&self.channel_gain_jitter) {
            return bad("channel gain jitter must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn check_band(&self, sample_rate_hz: f64) -> Result<()> {
        if self.carrier_freq_hz[1] >= 0.5 * sample_rate_hz {
            return Err(Error::Config(format!(
                "parasitic carrier {} Hz is above Nyquist for {} Hz sampling",
                self.carrier_freq_hz[1], sample_rate_hz
            )));
        }
        Ok(())
    }
}

/// White Gaussian noise drawn from the `"thermal"` stream of `seed`.
pub fn gen_thermal(spec: &ThermalNoiseSpec, shape: (usize, usize), sample_rate_hz: f64, seed: RngSeed) -> Sinogram {
    gen_thermal_with(spec, shape, sample_rate_hz, &mut seeded_rng(seed, "thermal"))
}

pub fn gen_thermal_with(spec: &ThermalNoiseSpec, shape: (usize, usize), sample_rate_hz: f64, rng: &mut OaRng) -> Sinogram {
    let data = if spec.sigma == 0.0 {
        Array2::zeros(shape)
    } else {
        Array2::from_shape_simple_fn(shape, || spec.sigma * rng.normal())
    };
    Sinogram::new(data, sample_rate_hz).expect("finite gaussian samples")
}

/// Parasitic bursts drawn from the `"parasitic"` stream of `seed`.
pub fn gen_parasitic(spec: &ParasiticNoiseSpec, shape: (usize, usize), sample_rate_hz: f64, seed: RngSeed) -> Sinogram {
    gen_parasitic_with(spec, shape, sample_rate_hz, &mut seeded_rng(seed, "parasitic"))
}

pub fn gen_parasitic_with(
    spec: &ParasiticNoiseSpec,
    shape: (usize, usize),
    sample_rate_hz: f64,
    rng: &mut OaRng,
) -> Sinogram {
    let (n_d, n_t) = shape;
    let mut data = Array2::zeros(shape);
    let bursts = spec.bursts.draw(rng);
    for _ in 0..bursts {
        let onset = rng.below(n_t) as i64;
        let freq = rng.uniform_range(spec.carrier_freq_hz[0], spec.carrier_freq_hz[1]);
        let decay_samples = rng.uniform_range(spec.decay_time_s[0], spec.decay_time_s[1]) * sample_rate_hz;
        let amp = rng.uniform_range(spec.amplitude[0], spec.amplitude[1]);
        let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
        let hi = spec.block_size[1].min(n_d);
        let lo = spec.block_size[0].min(hi);
        let block = rng.int_range(lo as i64, hi as i64) as usize;
        let first = rng.below(n_d - block + 1);
        let delay = rng.int_range(spec.channel_delay_samples[0], spec.channel_delay_samples[1]);
        // beyond this many samples the envelope is below 1e-6
        let span = (decay_samples * 6.0 * std::f64::consts::LN_10).ceil() as i64 + 1;
        let omega = std::f64::consts::TAU * freq / sample_rate_hz;
        for k in 0..block {
            let gain = 1.0 + spec.channel_gain_jitter * rng.uniform_range(-1.0, 1.0);
            let start = onset + k as i64 * delay;
            let mut row = data.row_mut(first + k);
            for x in 0..span {
                let t = start + x;
                if t < 0 {
                    continue;
                }
                if t >= n_t as i64 {
                    break;
                }
                let xf = x as f64;
                row[t as usize] += amp * gain * (-xf / decay_samples).exp() * (omega * xf + phase).sin();
            }
        }
    }
    Sinogram::new(data, sample_rate_hz).expect("finite bursts")
}

/// A noisy sinogram together with its ground-truth noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyPair {
    pub noisy: Sinogram,
    pub noise: Sinogram,
}

/// `s = s_oa + (n_th + n_par)`.
///
/// The sum is exact, and so is `noisy - noise == s_oa`, whenever all inputs
/// lie on the `f32` lattice within a 2^29 dynamic range of each other.
pub fn compose_noisy(s_oa: &Sinogram, n_th: &Sinogram, n_par: &Sinogram) -> Result<NoisyPair> {
    s_oa.check_same_shape(n_th, "thermal noise")?;
    s_oa.check_same_shape(n_par, "parasitic noise")?;
    let noise = s_oa.with_data(n_th.data() + n_par.data())?;
    let noisy = s_oa.with_data(s_oa.data() + noise.data())?;
    Ok(NoisyPair { noisy, noise })
}

/// Loads every `*.oasg` file of a directory, sorted by file name.
pub fn load_noise_corpus(dir: impl AsRef<Path>) -> Result<Vec<Sinogram>> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "oasg"))
        .collect();
    files.sort();
    if files.is_empty() {
        log::warn!("noise corpus {} is empty", dir.display());
        return Ok(Vec::new());
    }
    let sinograms: Vec<Sinogram> = files.iter().map(crate::io::read_sinogram).collect::<Result<_>>()?;
    let shape = sinograms[0].shape();
    let offenders: Vec<String> = files
        .iter()
        .zip(&sinograms)
        .filter(|(_, s)| s.shape() != shape)
        .map(|(f, s)| format!("{} {:?}", f.display(), s.shape()))
        .collect();
    if !offenders.is_empty() {
        return Err(Error::Shape(format!(
            "noise corpus {} mixes shapes; expected {shape:?}, offenders: {}",
            dir.display(),
            offenders.join(", ")
        )));
    }
    Ok(sinograms)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 40e6;

    fn std_dev(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn zero_sigma_is_silent() {
        let s = gen_thermal(&ThermalNoiseSpec { sigma: 0.0 }, (4, 8), FS, RngSeed(1));
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn thermal_std_matches_sigma() {
        let s = gen_thermal(&ThermalNoiseSpec { sigma: 0.25 }, (256, 1808), FS, RngSeed(42));
        let sd = std_dev(s.data().as_slice().unwrap());
        assert!((0.2475..=0.2525).contains(&sd), "{sd}");
    }

    #[test]
    fn thermal_is_deterministic() {
        let spec = ThermalNoiseSpec::default();
        assert_eq!(
            gen_thermal(&spec, (8, 64), FS, RngSeed(3)),
            gen_thermal(&spec, (8, 64), FS, RngSeed(3))
        );
    }

    #[test]
    fn no_bursts_no_noise() {
        let s = gen_parasitic(&ParasiticNoiseSpec::silent(), (8, 64), FS, RngSeed(1));
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_block_burst_is_identical_up_to_amplitude() {
        let spec = ParasiticNoiseSpec {
            bursts: BurstCount::Fixed(1),
            block_size: [16, 16],
            channel_delay_samples: [0, 0],
            ..Default::default()
        };
        let s = gen_parasitic(&spec, (16, 512), FS, RngSeed(5));
        let d = s.data();
        let r0 = d.row(0);
        let peak = r0.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak > 0.0);
        let k = r0.iter().position(|v| v.abs() == peak).unwrap();
        for ch in 1..16 {
            let ratio = d[[ch, k]] / r0[k];
            for t in 0..512 {
                assert!((d[[ch, t]] - ratio * r0[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bursts_correlate_within_block_only() {
        let spec = ParasiticNoiseSpec {
            bursts: BurstCount::Fixed(1),
            block_size: [8, 8],
            channel_delay_samples: [1, 1],
            amplitude: [1.0, 1.0],
            decay_time_s: [2e-6, 2e-6],
            carrier_freq_hz: [3e6, 3e6],
            ..Default::default()
        };
        let shape = (64, 1808);
        let par = gen_parasitic(&spec, shape, FS, RngSeed(11));
        let th = gen_thermal(&ThermalNoiseSpec { sigma: 0.05 }, shape, FS, RngSeed(11));
        let total = par.data() + th.data();
        let active: Vec<usize> = (0..64).filter(|&d| par.data().row(d).iter().any(|&v| v != 0.0)).collect();
        assert_eq!(active.len(), 8);
        let row = |d: usize| total.row(d).to_vec();
        for w in active.windows(2) {
            let r = corr(&row(w[0]), &row(w[1]));
            assert!(r > 0.5, "in-block r = {r}");
        }
        let outside: Vec<usize> = (0..64).filter(|d| !active.contains(d)).collect();
        for w in outside.windows(2).take(20) {
            let r = corr(&row(w[0]), &row(w[1]));
            assert!(r.abs() < 0.05, "out-of-block r = {r}");
        }
    }

    #[test]
    fn compose_adds_and_subtracts_exactly() {
        let shape = (4, 32);
        let grid = |seed: u64| {
            let g = gen_thermal(&ThermalNoiseSpec { sigma: 1.0 }, shape, FS, RngSeed(seed));
            g.quantized()
        };
        let (s, n1, n2) = (grid(1), grid(2), grid(3));
        let zero = Sinogram::zeros(4, 32, FS);
        assert_eq!(compose_noisy(&s, &zero, &zero).unwrap().noisy, s);
        assert_eq!(compose_noisy(&zero, &n1, &zero).unwrap().noise, n1);
        let pair = compose_noisy(&s, &n1, &n2).unwrap();
        assert_eq!(pair.noisy.data() - pair.noise.data(), *s.data());
        let wrong = Sinogram::zeros(3, 32, FS);
        assert!(compose_noisy(&s, &wrong, &zero).is_err());
    }

    #[test]
    fn corpus_loader_cases() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_noise_corpus(dir.path()).unwrap().is_empty());
        for i in 0..3 {
            let s = gen_thermal(&ThermalNoiseSpec::default(), (4, 16), FS, RngSeed(i));
            crate::io::write_sinogram(&s, dir.path().join(format!("n{i}.oasg"))).unwrap();
        }
        assert_eq!(load_noise_corpus(dir.path()).unwrap().len(), 3);

        let mut bytes = crate::io::encode_sinogram(&Sinogram::zeros(4, 16, FS));
        let at = crate::io::SINOGRAM_HEADER_LEN;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(dir.path().join("n9.oasg"), bytes).unwrap();
        let err = load_noise_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("n9.oasg"), "{err}");
    }

    #[test]
    fn mixed_shapes_list_offenders() {
        let dir = tempfile::tempdir().unwrap();
        crate::io::write_sinogram(&Sinogram::zeros(4, 16, FS), dir.path().join("a.oasg")).unwrap();
        crate::io::write_sinogram(&Sinogram::zeros(4, 32, FS), dir.path().join("b.oasg")).unwrap();
        let err = load_noise_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("b.oasg") && !err.contains("a.oasg"), "{err}");
    }
}
