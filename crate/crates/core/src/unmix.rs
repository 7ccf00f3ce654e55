//! Blind spectral unmixing by L1/Frobenius-regularised NMF and
//! depth-resolved relative contributions.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded_rng, RngSeed};
use crate::types::{ImageGrid, MultispectralStack};

/// Pixel spectra stacked over scans: one row per (scan, pixel), one
/// column per wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectraMatrix {
    pub s: Array2<f64>,
    pub wavelengths: Vec<f64>,
    /// `(n_y, n_x)` of every image.
    pub image_shape: (usize, usize),
    pub n_scans: usize,
    pub pixel_size_m: f64,
    /// Negative inputs set to zero during assembly.
    pub clamped: usize,
}

impl SpectraMatrix {
    pub fn n_rows(&self) -> usize {
        self.s.nrows()
    }

    /// `(scan, row, col)` of matrix row `i`; rows are scan-major, then
    /// row-major within each image.
    pub fn pixel_of(&self, i: usize) -> (usize, usize, usize) {
        let (ny, nx) = self.image_shape;
        let per = ny * nx;
        (i / per, (i % per) / nx, i % nx)
    }

    /// Depth of each matrix row below the top image row.
    pub fn pixel_depths(&self) -> Vec<f64> {
        (0..self.n_rows())
            .map(|i| self.pixel_of(i).1 as f64 * self.pixel_size_m)
            .collect()
    }

    /// Scatters column `values` (one per matrix row) back into the image of
    /// `scan`.
    pub fn to_image(&self, values: &[f64], scan: usize) -> Result<Array2<f64>> {
        if values.len() != self.n_rows() || scan >= self.n_scans {
            return Err(Error::Shape(format!(
                "{} values for {} rows, scan {scan} of {}",
                values.len(),
                self.n_rows(),
                self.n_scans
            )));
        }
        let (ny, nx) = self.image_shape;
        let off = scan * ny * nx;
        Ok(Array2::from_shape_fn((ny, nx), |(r, c)| values[off + r * nx + c]))
    }
}

/// Builds the spectra matrix from one multispectral image stack per scan.
pub fn assemble_spectra(stacks: &[MultispectralStack<ImageGrid>]) -> Result<SpectraMatrix> {
    let first = stacks.first().ok_or_else(|| Error::Data("no image stacks to unmix".into()))?;
    let wavelengths = first.wavelengths();
    let img0 = &first
        .entries()
        .first()
        .ok_or_else(|| Error::Data("image stack has no wavelengths".into()))?
        .1;
    let shape = img0.pixels().dim();
    for (k, st) in stacks.iter().enumerate() {
        if st.wavelengths() != wavelengths {
            return Err(Error::Shape(format!("scan {k} has different wavelengths")));
        }
        if let Some((_, img)) = st.entries().iter().find(|(_, i)| i.pixels().dim() != shape) {
            return Err(Error::Shape(format!(
                "scan {k} has a {:?} image, expected {:?}",
                img.pixels().dim(),
                shape
            )));
        }
    }
    let per = shape.0 * shape.1;
    let mut s = Array2::zeros((per * stacks.len(), wavelengths.len()));
    let mut clamped = 0;
    for (k, st) in stacks.iter().enumerate() {
        for (j, (_, img)) in st.entries().iter().enumerate() {
            for (p, &v) in img.pixels().iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("scan {k} wavelength {}", wavelengths[j]),
                        index: p,
                    });
                }
                if v < 0.0 {
                    clamped += 1;
                }
                s[[k * per + p, j]] = v.max(0.0);
            }
        }
    }
    Ok(SpectraMatrix {
        s,
        wavelengths,
        image_shape: shape,
        n_scans: stacks.len(),
        pixel_size_m: img0.extent_m() / shape.1 as f64,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmfConfig {
    pub k: usize,
    pub lambda_l1: f64,
    pub lambda_fro: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: RngSeed,
    pub n_restarts: usize,
}

impl Default for NmfConfig {
    fn default() -> Self {
        NmfConfig {
            k: 10,
            lambda_l1: 50.1,
            lambda_fro: 50.1,
            max_iters: 500,
            rel_tol: 1e-6,
            seed: RngSeed(0),
            n_restarts: 5,
        }
    }
}

impl NmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("NMF component count k must be at least 1".into()));
        }
        for (name, v) in [("lambda_l1", self.lambda_l1), ("lambda_fro", self.lambda_fro)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.rel_tol > 0.0) || self.max_iters == 0 || self.n_restarts == 0 {
            return Err(Error::Config("rel_tol, max_iters and n_restarts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfResult {
    /// Coefficients, rows × k.
    pub w: Array2<f64>,
    /// Spectra, k × wavelengths.
    pub h: Array2<f64>,
    /// Objective after initialisation, then after every W/H pass.
    pub trace: Vec<f64>,
    pub objective: f64,
    /// `‖S − WH‖_F² / ‖S‖_F²`.
    pub relative_error: f64,
    pub restart: usize,
}

const GUARD: f64 = 1e-12;

fn sum_sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// `½‖S − WH‖_F² + λ₁(‖W‖₁ + ‖H‖₁) + ½λ_F(‖W‖_F² + ‖H‖_F²)` with entrywise
/// norms.
pub fn nmf_objective(s: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>, cfg: &NmfConfig) -> Result<f64> {
    if w.nrows() != s.nrows() || h.ncols() != s.ncols() || w.ncols() != h.nrows() {
        return Err(Error::Shape(format!(
            "S {:?}, W {:?}, H {:?} do not compose",
            s.dim(),
            w.dim(),
            h.dim()
        )));
    }
    if w.iter().chain(h.iter()).any(|&v| v < 0.0) {
        return Err(Error::Data("NMF factors must be nonnegative".into()));
    }
    Ok(objective_unchecked(s, w, h, cfg))
}

fn objective_unchecked(s: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>, cfg: &NmfConfig) -> f64 {
    let r = s - &w.dot(h);
    0.5 * sum_sq(&r) + cfg.lambda_l1 * (w.sum() + h.sum()) + 0.5 * cfg.lambda_fro * (sum_sq(w) + sum_sq(h))
}

fn update_w(s: &Array2<f64>, w: &mut Array2<f64>, h: &Array2<f64>, cfg: &NmfConfig) {
    let num = s.dot(&h.t());
    let den = w.dot(&h.dot(&h.t()));
    ndarray::Zip::from(w).and(&num).and(&den).for_each(|wv, &n, &d| {
        *wv *= n / (d + cfg.lambda_l1 + cfg.lambda_fro * *wv + GUARD);
    });
}

fn update_h(s: &Array2<f64>, w: &Array2<f64>, h: &mut Array2<f64>, cfg: &NmfConfig) {
    let num = w.t().dot(s);
    let den = w.t().dot(w).dot(&*h);
    ndarray::Zip::from(h).and(&num).and(&den).for_each(|hv, &n, &d| {
        *hv *= n / (d + cfg.lambda_l1 + cfg.lambda_fro * *hv + GUARD);
    });
}

fn run_once(s: &Array2<f64>, cfg: &NmfConfig, restart: usize) -> Result<NmfResult> {
    let (n, m) = s.dim();
    let mut rng = seeded_rng(cfg.seed, "nmf").child(&format!("restart{restart}"));
    let mut w = Array2::from_shape_simple_fn((n, cfg.k), || rng.normal().abs());
    let mut h = Array2::from_shape_simple_fn((cfg.k, m), || rng.normal().abs());
    let target = s.mean().unwrap_or(0.0);
    let current = w.dot(&h).mean().unwrap_or(0.0);
    if current > 0.0 && target > 0.0 {
        let f = (target / current).sqrt();
        w *= f;
        h *= f;
    }
    let mut f = objective_unchecked(s, &w, &h, cfg);
    let mut trace = vec![f];
    for pass in 1..=cfg.max_iters {
        update_w(s, &mut w, &h, cfg);
        update_h(s, &w, &mut h, cfg);
        let next = objective_unchecked(s, &w, &h, cfg);
        if !next.is_finite() {
            let tail: Vec<String> = trace.iter().rev().take(5).map(|v| format!("{v:.6e}")).collect();
            return Err(Error::Numerical(format!(
                "NMF objective non-finite at pass {pass} of restart {restart} (recent: [{}])",
                tail.join(", ")
            )));
        }
        if next > f + 1e-10 {
            log::warn!("NMF objective rose by {:.3e} at pass {pass} of restart {restart}", next - f);
        }
        trace.push(next);
        let change = (f - next).abs() / f.abs().max(f64::MIN_POSITIVE);
        f = next;
        if change < cfg.rel_tol {
            break;
        }
    }
    let s2 = sum_sq(s);
    let rel = if s2 > 0.0 { sum_sq(&(s - &w.dot(&h))) / s2 } else { 0.0 };
    Ok(NmfResult {
        w,
        h,
        trace,
        objective: f,
        relative_error: rel,
        restart,
    })
}

/// Multiplicative-update NMF; returns the restart with the lowest final
/// objective.
pub fn nmf_factorize(spectra: &SpectraMatrix, cfg: &NmfConfig) -> Result<NmfResult> {
    nmf_factorize_matrix(&spectra.s, cfg)
}

pub fn nmf_factorize_matrix(s: &Array2<f64>, cfg: &NmfConfig) -> Result<NmfResult> {
    cfg.validate()?;
    if s.is_empty() {
        return Err(Error::Data("spectra matrix is empty".into()));
    }
    if s.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Data("spectra matrix must be finite and nonnegative".into()));
    }
    let runs: Vec<Result<NmfResult>> = (0..cfg.n_restarts).into_par_iter().map(|r| run_once(s, cfg, r)).collect();
    let mut best: Option<NmfResult> = None;
    for r in runs {
        let r = r?;
        if best.as_ref().is_none_or(|b| r.objective < b.objective) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Relative contributions of selected components per depth bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthProfiles {
    pub depth_m: Vec<f64>,
    pub components: Vec<usize>,
    /// `values[c][bin]`; `None` where the bin holds no pixels or the
    /// selected components are all zero.
    pub values: Vec<Vec<Option<f64>>>,
}

/// Bin means of the selected coefficient columns, normalised per bin to
/// sum to one, then a moving average over the defined bins within
/// `±smooth_halfwidth_m`. Undefined bins stay undefined.
pub fn depth_profiles(
    result: &NmfResult,
    selected: &[usize],
    pixel_depth_m: &[f64],
    bin_m: f64,
    smooth_halfwidth_m: f64,
) -> Result<DepthProfiles> {
    if selected.is_empty() {
        return Err(Error::Config("no components selected for depth profiles".into()));
    }
    if let Some(&c) = selected.iter().find(|&&c| c >= result.w.ncols()) {
        return Err(Error::Config(format!("component {c} out of range for k = {}", result.w.ncols())));
    }
    if pixel_depth_m.len() != result.w.nrows() {
        return Err(Error::Shape(format!(
            "{} depths for {} coefficient rows",
            pixel_depth_m.len(),
            result.w.nrows()
        )));
    }
    if !(bin_m > 0.0) || !(smooth_halfwidth_m >= 0.0) {
        return Err(Error::Config("bin width must be positive and smoothing nonnegative".into()));
    }
    let max_depth = pixel_depth_m.iter().copied().fold(0.0f64, f64::max);
    let n_bins = (max_depth / bin_m + 1e-9).floor() as usize + 1;
    let n_sel = selected.len();
    let mut sums = Array2::<f64>::zeros((n_sel, n_bins));
    let mut counts = vec![0usize; n_bins];
    for (i, &d) in pixel_depth_m.iter().enumerate() {
        if !(d >= 0.0) {
            return Err(Error::Data(format!("negative or non-finite depth at row {i}")));
        }
        let b = ((d / bin_m + 1e-9).floor() as usize).min(n_bins - 1);
        counts[b] += 1;
        for (j, &c) in selected.iter().enumerate() {
            sums[[j, b]] += result.w[[i, c]];
        }
    }
    let mut rel: Vec<Option<Array1<f64>>> = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        if counts[b] == 0 {
            rel.push(None);
            continue;
        }
        let means = sums.index_axis(Axis(1), b).mapv(|v| v / counts[b] as f64);
        let total = means.sum();
        rel.push((total > 0.0).then(|| means / total));
    }
    let half = (smooth_halfwidth_m / bin_m).round() as usize;
    let mut values = vec![vec![None; n_bins]; n_sel];
    for b in 0..n_bins {
        if rel[b].is_none() {
            continue;
        }
        let lo = b.saturating_sub(half);
        let hi = (b + half).min(n_bins - 1);
        let mut acc = Array1::<f64>::zeros(n_sel);
        let mut n = 0;
        for r in rel[lo..=hi].iter().flatten() {
            acc += r;
            n += 1;
        }
        for j in 0..n_sel {
            values[j][b] = Some(acc[j] / n as f64);
        }
    }
    Ok(DepthProfiles {
        depth_m: (0..n_bins).map(|b| b as f64 * bin_m).collect(),
        components: selected.to_vec(),
        values,
    })
}

/// Named absorption spectrum sampled at some wavelengths.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSpectrum {
    pub name: String,
    pub values: Vec<f64>,
}

/// Smooth synthetic stand-ins for common chromophores, for tests and
/// descriptive matching only.
pub fn synthetic_reference_spectra(wavelengths: &[f64]) -> Vec<ReferenceSpectrum> {
    let bump = |c: f64, w: f64| move |l: f64| (-((l - c) / w).powi(2)).exp();
    let shapes: [(&str, Box<dyn Fn(f64) -> f64>); 4] = [
        ("oxyhemoglobin", Box::new(move |l| 0.3 + bump(900.0, 80.0)(l))),
        ("deoxyhemoglobin", Box::new(move |l| bump(700.0, 60.0)(l) + 0.4 * bump(757.0, 12.0)(l))),
        ("lipid", Box::new(move |l| 0.1 + bump(930.0, 18.0)(l))),
        ("water", Box::new(move |l| 0.05 + bump(975.0, 30.0)(l))),
    ];
    shapes
        .iter()
        .map(|(name, f)| ReferenceSpectrum {
            name: name.to_string(),
            values: wavelengths.iter().map(|&l| f(l)).collect(),
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMatch {
    pub component: usize,
    pub reference: String,
    pub correlation: f64,
}

/// Best-correlated reference per component.
pub fn match_components(h: &Array2<f64>, references: &[ReferenceSpectrum]) -> Vec<ComponentMatch> {
    (0..h.nrows())
        .filter_map(|c| {
            let row: Vec<f64> = h.row(c).to_vec();
            references
                .iter()
                .map(|r| (r, pearson(&row, &r.values)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(r, corr)| ComponentMatch {
                    component: c,
                    reference: r.name.clone(),
                    correlation: corr,
                })
        })
        .collect()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

/// `H` as CSV: one row per component, one column per wavelength.
pub fn write_spectra_csv(h: &Array2<f64>, wavelengths: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["component".to_string()];
    header.extend(wavelengths.iter().map(|l| format!("{l}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for (c, row) in h.outer_iter().enumerate() {
        let mut rec = vec![c.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:.9e}")));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_depth_profiles_csv(p: &DepthProfiles, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["depth_m".to_string()];
    header.extend(p.components.iter().map(|c| format!("component_{c}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for (b, d) in p.depth_m.iter().enumerate() {
        let mut rec = vec![format!("{d:.6e}")];
        rec.extend(p.values.iter().map(|v| v[b].map(|x| format!("{x:.9e}")).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
