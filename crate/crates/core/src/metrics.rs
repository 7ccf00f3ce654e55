//! Sinogram power, SNR, noise-floor based mean SNR and image contrast
//! resolution.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_pgm;
use crate::types::{ImageGrid, Sinogram};

/// Channels used in powers; excluded channels are ignored entirely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask {
    include: Vec<bool>,
}

impl ChannelMask {
    pub fn all(n: usize) -> Self {
        ChannelMask { include: vec![true; n] }
    }

    pub fn new(include: Vec<bool>) -> Result<Self> {
        if !include.iter().any(|&b| b) {
            return Err(Error::Config("channel mask excludes every channel".into()));
        }
        Ok(ChannelMask { include })
    }

    /// All of `n` channels except the listed 0-based indices.
    pub fn excluding(n: usize, excluded: &[usize]) -> Result<Self> {
        let mut include = vec![true; n];
        for &d in excluded {
            if d >= n {
                return Err(Error::Config(format!("excluded channel {d} out of range for {n} channels")));
            }
            include[d] = false;
        }
        Self::new(include)
    }

    pub fn len(&self) -> usize {
        self.include.len()
    }

    pub fn is_empty(&self) -> bool {
        self.include.is_empty()
    }

    pub fn includes(&self, d: usize) -> bool {
        self.include[d]
    }

    pub fn included(&self) -> impl Iterator<Item = usize> + '_ {
        self.include.iter().enumerate().filter(|(_, &b)| b).map(|(d, _)| d)
    }

    fn check(&self, n_transducers: usize) -> Result<()> {
        if self.include.len() != n_transducers {
            return Err(Error::Shape(format!(
                "channel mask has {} entries for {} transducers",
                self.include.len(),
                n_transducers
            )));
        }
        Ok(())
    }
}

fn masked_power(data: &Array2<f64>, mask: &ChannelMask) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for d in mask.included() {
        let row = data.row(d);
        acc += row.iter().map(|v| v * v).sum::<f64>();
        n += row.len();
    }
    acc / n as f64
}

/// Mean squared sample over included channels and all time samples.
pub fn power(s: &Sinogram, mask: &ChannelMask) -> Result<f64> {
    mask.check(s.n_transducers())?;
    Ok(masked_power(s.data(), mask))
}

/// `10·log10(num/den)`; a zero denominator gives `+∞`.
pub fn db_ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (num / den).log10()
    }
}

/// `10·log10(P(s − s_noise) / P(s_noise − s_noise_hat))` in dB. Passing a
/// zero `s_noise_hat` gives the SNR before denoising.
pub fn snr(s: &Sinogram, s_noise: &Sinogram, s_noise_hat: &Sinogram, mask: &ChannelMask) -> Result<f64> {
    s.check_same_shape(s_noise, "noise")?;
    s.check_same_shape(s_noise_hat, "noise estimate")?;
    mask.check(s.n_transducers())?;
    let signal = masked_power(&(s.data() - s_noise.data()), mask);
    let residual = masked_power(&(s_noise.data() - s_noise_hat.data()), mask);
    Ok(db_ratio(signal, residual))
}

/// Mean of the finite values and the number of infinite ones left out.
pub fn finite_mean(values: &[f64]) -> (f64, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let excluded = values.len() - finite.len();
    let mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    (mean, excluded)
}

fn mean_abs(stack: &[&Array2<f64>], crop: usize) -> Array2<f64> {
    let (rows, _) = stack[0].dim();
    let mut acc = Array2::zeros((rows, crop));
    for s in stack {
        acc.zip_mut_with(&s.slice(ndarray::s![.., ..crop]), |a, v| *a += v.abs());
    }
    acc / stack.len() as f64
}

fn check_stack(stack: &[Sinogram], what: &str) -> Result<()> {
    let first = stack
        .first()
        .ok_or_else(|| Error::Data(format!("{what} stack is empty")))?;
    for s in &stack[1..] {
        first.check_same_shape(s, what)?;
    }
    Ok(())
}

/// Per-channel mean of `|s|` over all scans and the first `window_samples`
/// samples; taken as the time-constant noise amplitude of that channel.
pub fn estimate_noise_floor(stack: &[Sinogram], window_samples: usize) -> Result<Array1<f64>> {
    check_stack(stack, "noise floor")?;
    let n = stack[0].n_samples();
    if window_samples == 0 || window_samples > n {
        return Err(Error::Config(format!(
            "noise-floor window {window_samples} must lie in 1..={n}"
        )));
    }
    let refs: Vec<&Array2<f64>> = stack.iter().map(|s| s.data()).collect();
    Ok(mean_abs(&refs, window_samples).mean_axis(Axis(1)).expect("nonempty window"))
}

/// How [`snr_mean`] aggregates powers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    Whole,
    PerTime,
    PerTransducer,
}

impl MeanMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MeanMode::Whole => "whole",
            MeanMode::PerTime => "per_time",
            MeanMode::PerTransducer => "per_transducer",
        }
    }
}

/// Mean-SNR values in dB: one entry in whole mode, otherwise one per time
/// sample or per included transducer.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrCurve {
    pub mode: MeanMode,
    pub index: Vec<usize>,
    pub values_db: Vec<f64>,
}

impl SnrCurve {
    pub fn mean(&self) -> (f64, usize) {
        finite_mean(&self.values_db)
    }
}

/// Mean SNR without ground-truth noise: signal amplitude is the scan-mean
/// `|s|` minus the noise floor, residual is the floor minus the scan-mean
/// `|s − denoised|`. Both stacks are cropped to `crop_samples` first.
pub fn snr_mean(
    stack: &[Sinogram],
    denoised_stack: &[Sinogram],
    window_samples: usize,
    crop_samples: usize,
    mask: &ChannelMask,
    mode: MeanMode,
) -> Result<SnrCurve> {
    check_stack(stack, "noisy")?;
    check_stack(denoised_stack, "denoised")?;
    if stack.len() != denoised_stack.len() {
        return Err(Error::Shape(format!(
            "{} noisy scans but {} denoised scans",
            stack.len(),
            denoised_stack.len()
        )));
    }
    stack[0].check_same_shape(&denoised_stack[0], "denoised")?;
    let (n_d, n_t) = stack[0].shape();
    mask.check(n_d)?;
    if crop_samples == 0 || crop_samples > n_t {
        return Err(Error::Config(format!("crop {crop_samples} must lie in 1..={n_t}")));
    }
    if window_samples > crop_samples {
        return Err(Error::Config(format!(
            "noise-floor window {window_samples} exceeds crop {crop_samples}"
        )));
    }
    let floor = estimate_noise_floor(stack, window_samples)?;
    let refs: Vec<&Array2<f64>> = stack.iter().map(|s| s.data()).collect();
    let mean_s = mean_abs(&refs, crop_samples);
    let inferred: Vec<Array2<f64>> = stack
        .iter()
        .zip(denoised_stack)
        .map(|(s, d)| s.data() - d.data())
        .collect();
    let refs: Vec<&Array2<f64>> = inferred.iter().collect();
    let mean_hat = mean_abs(&refs, crop_samples);
    let floor_b = floor.clone().insert_axis(Axis(1));
    let sig = &mean_s - &floor_b;
    let res = &mean_hat * -1.0 + &floor_b;
    let sig2 = sig.mapv(|v| v * v);
    let res2 = res.mapv(|v| v * v);
    let included: Vec<usize> = mask.included().collect();
    let (index, values_db) = match mode {
        MeanMode::Whole => (vec![0], vec![db_ratio(masked_power(&sig, mask), masked_power(&res, mask))]),
        MeanMode::PerTime => {
            let vals = (0..crop_samples)
                .map(|t| {
                    let num: f64 = included.iter().map(|&d| sig2[[d, t]]).sum();
                    let den: f64 = included.iter().map(|&d| res2[[d, t]]).sum();
                    db_ratio(num, den)
                })
                .collect();
            ((0..crop_samples).collect(), vals)
        }
        MeanMode::PerTransducer => {
            let vals = included
                .iter()
                .map(|&d| db_ratio(sig2.row(d).sum(), res2.row(d).sum()))
                .collect();
            (included.clone(), vals)
        }
    };
    Ok(SnrCurve { mode, index, values_db })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiLabel {
    Vessel,
    Background,
}

/// Boolean pixel mask with a role.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    pub mask: Array2<bool>,
    pub label: RoiLabel,
}

impl RoiMask {
    pub fn new(mask: Array2<bool>, label: RoiLabel) -> Result<Self> {
        if !mask.iter().any(|&b| b) {
            return Err(Error::Data(format!("{label:?} mask selects no pixels")));
        }
        Ok(RoiMask { mask, label })
    }

    /// Nonzero PGM samples are inside the mask.
    pub fn from_pgm(path: impl AsRef<Path>, label: RoiLabel) -> Result<Self> {
        let pgm = read_pgm(path)?;
        let mask = Array2::from_shape_fn((pgm.height, pgm.width), |(r, c)| pgm.samples[r * pgm.width + c] > 0);
        Self::new(mask, label)
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Mean over the mask minus `reference`, accumulated as deviations so
    /// that equal region means compare exactly.
    fn mean_offset(&self, img: &Array2<f64>, reference: f64) -> f64 {
        let (sum, n) = img
            .iter()
            .zip(self.mask.iter())
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + (v - reference), n + 1));
        sum / n as f64
    }
}

/// `(I_v − I_b)/(I_v + I_b)` from mask means; `None` when `I_v + I_b = 0`.
pub fn contrast_resolution(img: &ImageGrid, vessels: &RoiMask, background: &RoiMask) -> Result<Option<f64>> {
    let dim = img.pixels().dim();
    for m in [vessels, background] {
        if m.mask.dim() != dim {
            return Err(Error::Shape(format!(
                "{:?} mask is {:?} but the image is {:?}",
                m.label,
                m.mask.dim(),
                dim
            )));
        }
    }
    if vessels.mask.iter().zip(background.mask.iter()).any(|(&a, &b)| a && b) {
        return Err(Error::Data("vessel and background masks overlap".into()));
    }
    let reference = img
        .pixels()
        .iter()
        .zip(vessels.mask.iter())
        .find(|(_, &m)| m)
        .map_or(0.0, |(v, _)| *v);
    let dv = vessels.mean_offset(img.pixels(), reference);
    let db = background.mean_offset(img.pixels(), reference);
    let den = 2.0 * reference + dv + db;
    Ok(if den == 0.0 { None } else { Some((dv - db) / den) })
}

/// One line of a metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub scan_id: String,
    pub wavelength_nm: Option<f64>,
    pub metric: String,
    pub mode: String,
    pub value: f64,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

pub(crate) fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v.is_nan() {
        String::new()
    } else {
        format!("{v:.9e}")
    }
}

pub fn write_metric_rows(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["scan_id", "wavelength", "metric", "mode", "value"]).map_err(csv_err(path))?;
    for r in rows {
        let wl = r.wavelength_nm.map(|v| format!("{v}")).unwrap_or_default();
        w.write_record([r.scan_id.as_str(), &wl, &r.metric, &r.mode, &fmt_value(r.value)])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_curve(index: &[usize], values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["index", "value"]).map_err(csv_err(path))?;
    for (i, v) in index.iter().zip(values) {
        w.write_record([i.to_string(), fmt_value(*v)]).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{gen_thermal, ThermalNoiseSpec};
    use crate::rng::RngSeed;
    use ndarray::array;

    fn sino(a: Array2<f64>) -> Sinogram {
        Sinogram::new(a, 40e6).unwrap()
    }

    #[test]
    fn power_examples() {
        let all = ChannelMask::all(3);
        assert_eq!(power(&sino(Array2::from_elem((3, 5), 2.0)), &all).unwrap(), 4.0);
        assert_eq!(power(&sino(Array2::zeros((3, 5))), &all).unwrap(), 0.0);
        let s = sino(array![[1.0, 1.0], [3.0, 3.0]]);
        let m = ChannelMask::excluding(2, &[1]).unwrap();
        assert_eq!(power(&s, &m).unwrap(), 1.0);
        assert!(ChannelMask::excluding(1, &[0]).is_err());
        assert!(power(&s, &ChannelMask::all(3)).is_err());
    }

    #[test]
    fn snr_examples() {
        let noise = sino(array![[1.0, -1.0, 1.0, -1.0]]);
        let signal = array![[10.0, -10.0, 10.0, -10.0]];
        let s = sino(&signal + noise.data());
        let zero = sino(Array2::zeros((1, 4)));
        let m = ChannelMask::all(1);
        assert!((snr(&s, &noise, &zero, &m).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(snr(&s, &noise, &noise, &m).unwrap(), f64::INFINITY);
        // half the noise removed: residual power / 4
        let half = sino(noise.data() * 0.5);
        let before = snr(&s, &noise, &zero, &m).unwrap();
        let after = snr(&s, &noise, &half, &m).unwrap();
        let direct = 10.0 * (100.0f64 / 0.25).log10() - 10.0 * (100.0f64 / 1.0).log10();
        assert!((after - before - direct).abs() < 1e-12);
    }

    #[test]
    fn snr_is_scale_invariant_and_additive_noise_shift_is_exact() {
        let s = sino(array![[3.0, -1.0, 2.0, 0.5], [1.0, 1.0, -2.0, 4.0]]);
        let n = sino(array![[0.5, 0.2, -0.1, 0.3], [-0.4, 0.1, 0.2, -0.2]]);
        let h = sino(array![[0.1, 0.0, 0.0, 0.1], [0.0, -0.1, 0.1, 0.0]]);
        let m = ChannelMask::all(2);
        let a = snr(&s, &n, &h, &m).unwrap();
        let k = 7.5;
        let b = snr(&sino(s.data() * k), &sino(n.data() * k), &sino(h.data() * k), &m).unwrap();
        assert!((a - b).abs() < 1e-12);
        // residual orthogonal to the noise adds its power exactly
        let zero = sino(Array2::zeros((2, 4)));
        let n0 = sino(array![[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0]]);
        let extra = array![[1.0, -1.0, 1.0, -1.0], [1.0, -1.0, 1.0, -1.0]] * 0.5;
        let s0 = sino(n0.data() + 5.0);
        let base = snr(&s0, &n0, &zero, &m).unwrap();
        let n1 = sino(n0.data() + &extra);
        let s1 = sino(s0.data() + &extra);
        let shifted = snr(&s1, &n1, &zero, &m).unwrap();
        assert!((base - shifted - 10.0 * (1.25f64 / 1.0).log10()).abs() < 1e-12);
    }

    #[test]
    fn noise_floor_examples() {
        let one = sino(Array2::from_elem((2, 10), -1.0));
        assert!(estimate_noise_floor(std::slice::from_ref(&one), 4).unwrap().iter().all(|&v| v == 1.0));
        let three = sino(Array2::from_elem((2, 10), 3.0));
        assert!(estimate_noise_floor(&[one, three], 4).unwrap().iter().all(|&v| v == 2.0));
        assert!(estimate_noise_floor(&[], 4).is_err());
    }

    #[test]
    fn noise_floor_matches_folded_normal_mean() {
        let spec = ThermalNoiseSpec { sigma: 0.25 };
        let stack: Vec<Sinogram> = (0..200).map(|i| gen_thermal(&spec, (4, 100), 40e6, RngSeed(i))).collect();
        let floor = estimate_noise_floor(&stack, 100).unwrap();
        let oracle = 0.25 * (2.0 / std::f64::consts::PI).sqrt();
        for &v in &floor {
            assert!((v - oracle).abs() < 0.02 * oracle, "{v} vs {oracle}");
        }
    }

    #[test]
    fn snr_mean_hand_case() {
        let mut a = Array2::from_elem((1, 8), 1.0);
        a.slice_mut(ndarray::s![.., 4..]).fill(3.0);
        let s = sino(a);
        // denoised == s means the inferred noise is zero
        let out = snr_mean(std::slice::from_ref(&s), std::slice::from_ref(&s), 4, 8, &ChannelMask::all(1), MeanMode::Whole).unwrap();
        assert!((out.values_db[0] - 10.0 * 2f64.log10()).abs() < 1e-12);
        assert!((out.values_db[0] - 3.0103).abs() < 1e-4);
    }

    #[test]
    fn snr_mean_modes_and_sentinel() {
        let s = sino(Array2::from_shape_fn((3, 8), |(d, t)| if t < 4 { 1.0 } else { 2.0 + d as f64 }));
        // inferred noise magnitude equal to the floor everywhere
        let denoised = sino(s.data() - 1.0);
        let m = ChannelMask::excluding(3, &[1]).unwrap();
        let out = snr_mean(std::slice::from_ref(&s), &[denoised], 4, 8, &m, MeanMode::Whole).unwrap();
        assert_eq!(out.values_db, vec![f64::INFINITY]);
        let zero_hat = s.clone();
        let per_d = snr_mean(std::slice::from_ref(&s), std::slice::from_ref(&zero_hat), 4, 8, &m, MeanMode::PerTransducer).unwrap();
        assert_eq!(per_d.index, vec![0, 2]);
        let per_t = snr_mean(std::slice::from_ref(&s), &[zero_hat], 4, 6, &m, MeanMode::PerTime).unwrap();
        assert_eq!(per_t.index.len(), 6);
        assert_eq!(per_t.values_db[0], f64::NEG_INFINITY);
        assert!(snr_mean(std::slice::from_ref(&s), std::slice::from_ref(&s), 4, 9, &m, MeanMode::Whole).is_err());
        let (mean, excluded) = finite_mean(&[1.0, f64::INFINITY, 3.0]);
        assert_eq!((mean, excluded), (2.0, 1));
    }

    fn masks() -> (RoiMask, RoiMask) {
        let v = RoiMask::new(array![[true, false], [false, false]], RoiLabel::Vessel).unwrap();
        let b = RoiMask::new(array![[false, true], [true, false]], RoiLabel::Background).unwrap();
        (v, b)
    }

    #[test]
    fn contrast_resolution_examples() {
        let (v, b) = masks();
        let img = |a: Array2<f64>| ImageGrid::new(a, 1e-3).unwrap();
        let cr = contrast_resolution(&img(array![[2.0, 1.0], [1.0, 9.0]]), &v, &b).unwrap().unwrap();
        assert!((cr - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(contrast_resolution(&img(Array2::from_elem((2, 2), 4.0)), &v, &b).unwrap(), Some(0.0));
        assert_eq!(contrast_resolution(&img(array![[5.0, 0.0], [0.0, 1.0]]), &v, &b).unwrap(), Some(1.0));
        assert_eq!(contrast_resolution(&img(Array2::zeros((2, 2))), &v, &b).unwrap(), None);
        let overlap = RoiMask::new(array![[true, true], [false, false]], RoiLabel::Background).unwrap();
        assert!(contrast_resolution(&img(Array2::zeros((2, 2))), &v, &overlap).is_err());
        assert!(RoiMask::new(Array2::from_elem((2, 2), false), RoiLabel::Vessel).is_err());
    }

    #[test]
    fn csv_writers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metric_rows(
            &[MetricRow {
                scan_id: "a".into(),
                wavelength_nm: Some(800.0),
                metric: "snr".into(),
                mode: "whole".into(),
                value: f64::INFINITY,
            }],
            &p,
        )
        .unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "scan_id,wavelength,metric,mode,value\na,800,snr,whole,inf\n"
        );
        let q = dir.path().join("c.csv");
        write_curve(&[0, 1], &[1.5, 2.0], &q).unwrap();
        assert!(std::fs::read_to_string(&q).unwrap().starts_with("index,value\n0,1.5"));
    }
}
