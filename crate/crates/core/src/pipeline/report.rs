//! Aggregates stage CSVs into report tables, plots and a pass/fail
//! summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::plot::{render_bars, render_lines};
use super::stages::Table;
use super::{create_dir, require, walk_files};
use crate::error::{Error, Result};
use crate::metrics::fmt_value;

pub const DENOISE_MEAN_GAIN_DB: f64 = 5.0;
pub const DENOISE_MIN_GAIN_DB: f64 = 0.0;
/// Sweep levels up to this σ must show a positive mean gain.
pub const SWEEP_GATED_SIGMA: f64 = 0.5;
pub const CR_MIN_FRACTION: f64 = 0.9;
pub const CR_MEAN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Missing,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Missing => "MISSING",
        }
    }

    fn of(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    /// Files written, relative to the report directory.
    pub artifacts: Vec<PathBuf>,
    pub warnings: Vec<String>,
    /// `(check, verdict, detail)`.
    pub verdicts: Vec<(String, Verdict, String)>,
}

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path) -> Result<Self> {
        let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        let header = r.headers().map_err(err)?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(err)?;
        Ok(Csv { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column {name:?} missing")))
    }

    fn num(&self, row: &[String], col: usize) -> f64 {
        row[col].trim().parse().unwrap_or(f64::NAN)
    }

    fn column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.col(name)?;
        Ok(self.rows.iter().map(|r| self.num(r, c)).collect())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Inputs located under the results directory; `None` when absent.
#[derive(Default)]
struct Sources {
    en_snr: Option<PathBuf>,
    sweep: Option<PathBuf>,
    per_time: Option<PathBuf>,
    per_transducer: Option<PathBuf>,
    cr: Option<PathBuf>,
    depth: Option<PathBuf>,
}

fn locate(results: &Path, skip: &Path, warnings: &mut Vec<String>) -> Result<Sources> {
    let mut found: BTreeMap<&str, Vec<PathBuf>> = BTreeMap::new();
    let names = [
        "snr.csv",
        "snr_sweep.csv",
        "snr_mean_per_time.csv",
        "snr_mean_per_transducer.csv",
        "cr.csv",
        "depth_profiles.csv",
    ];
    let skip = skip.canonicalize().ok();
    for rel in walk_files(results)? {
        let full = results.join(&rel);
        if let (Some(s), Ok(f)) = (&skip, full.canonicalize()) {
            if f.starts_with(s) {
                continue;
            }
        }
        let Some(name) = rel.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(&n) = names.iter().find(|&&n| n == name) {
            if n == "snr.csv" && !Csv::read(&full)?.header.iter().any(|h| h == "source") {
                // per-σ table of a Gaussian sweep
                continue;
            }
            found.entry(n).or_default().push(full);
        }
    }
    let mut pick = |name: &str| {
        let list = found.remove(name).unwrap_or_default();
        if list.len() > 1 {
            warnings.push(format!("{} copies of {name}; using {}", list.len(), list[0].display()));
        }
        if list.is_empty() {
            warnings.push(format!("missing {name}"));
        }
        list.into_iter().next()
    };
    Ok(Sources {
        en_snr: pick("snr.csv"),
        sweep: pick("snr_sweep.csv"),
        per_time: pick("snr_mean_per_time.csv"),
        per_transducer: pick("snr_mean_per_transducer.csv"),
        cr: pick("cr.csv"),
        depth: pick("depth_profiles.csv"),
    })
}

/// Builds the report bundle in `out` from whatever stage outputs exist
/// below `results_dir`. Missing inputs are listed in `warnings.txt`.
pub fn cmd_report(results_dir: &Path, out: &Path) -> Result<Report> {
    require(results_dir)?;
    create_dir(out)?;
    let mut rep = Report::default();
    let src = locate(results_dir, out, &mut rep.warnings)?;
    let emit = |rep: &mut Report, name: &str| rep.artifacts.push(PathBuf::from(name));

    match &src.en_snr {
        Some(p) => {
            let gains = Csv::read(p)?.column("gain_db")?;
            let finite: Vec<f64> = gains.iter().copied().filter(|g| g.is_finite()).collect();
            if finite.is_empty() {
                rep.verdicts.push(("denoising_gain".into(), Verdict::Missing, "no finite gains".into()));
            } else {
                let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let start = lo.floor();
                let n_bins = ((hi.floor() - start) as usize) + 1;
                let mut counts = vec![0usize; n_bins];
                for g in &finite {
                    counts[((g - start).floor() as usize).min(n_bins - 1)] += 1;
                }
                let mut t = Table::create(out.join("snr_gain_histogram.csv"), &["bin_low_db", "bin_high_db", "count"])?;
                for (i, c) in counts.iter().enumerate() {
                    let b = start + i as f64;
                    t.row([b.to_string(), (b + 1.0).to_string(), c.to_string()])?;
                }
                t.finish()?;
                render_bars(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>(), out.join("snr_gain_histogram.pgm"))?;
                emit(&mut rep, "snr_gain_histogram.csv");
                let m = mean(&finite);
                rep.verdicts.push((
                    "denoising_gain".into(),
                    Verdict::of(m >= DENOISE_MEAN_GAIN_DB && lo >= DENOISE_MIN_GAIN_DB && finite.len() == gains.len()),
                    format!("mean_gain_db={} min_gain_db={} n={}", fmt_value(m), fmt_value(lo), gains.len()),
                ));
            }
        }
        None => rep.verdicts.push(("denoising_gain".into(), Verdict::Missing, "snr.csv not found".into())),
    }

    for (path, name) in [(&src.per_time, "snr_mean_per_time"), (&src.per_transducer, "snr_mean_per_transducer")] {
        if let Some(p) = path {
            let c = Csv::read(p)?;
            let idx = c.column("index")?;
            let val = c.column("value")?;
            let mut t = Table::create(out.join(format!("{name}.csv")), &["index", "snr_mean_db"])?;
            for (i, v) in idx.iter().zip(&val) {
                t.row([i.to_string(), fmt_value(*v)])?;
            }
            t.finish()?;
            render_lines(&[idx.into_iter().zip(val).collect()], out.join(format!("{name}.pgm")))?;
            emit(&mut rep, &format!("{name}.csv"));
        }
    }

    match &src.sweep {
        Some(p) => {
            let c = Csv::read(p)?;
            let sigma = c.column("sigma")?;
            let gain = c.column("mean_gain_db")?;
            let mut t = Table::create(out.join("sigma_sweep.csv"), &["sigma", "mean_gain_db"])?;
            for (s, g) in sigma.iter().zip(&gain) {
                t.row([s.to_string(), fmt_value(*g)])?;
            }
            t.finish()?;
            render_lines(&[sigma.iter().copied().zip(gain.iter().copied()).collect()], out.join("sigma_sweep.pgm"))?;
            emit(&mut rep, "sigma_sweep.csv");
            let gated: Vec<(f64, f64)> = sigma
                .iter()
                .zip(&gain)
                .filter(|(&s, _)| s > 0.0 && s <= SWEEP_GATED_SIGMA + 1e-9)
                .map(|(&s, &g)| (s, g))
                .collect();
            let worst = gated.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            rep.verdicts.push((
                "gaussian_sweep".into(),
                if gated.is_empty() { Verdict::Missing } else { Verdict::of(worst > 0.0) },
                format!("levels={} worst_mean_gain_db={}", gated.len(), fmt_value(worst)),
            ));
        }
        None => rep.verdicts.push(("gaussian_sweep".into(), Verdict::Missing, "snr_sweep.csv not found".into())),
    }

    match &src.cr {
        Some(p) => {
            let c = Csv::read(p)?;
            let (scan, wl, mode, val) = (c.col("scan_id")?, c.col("wavelength")?, c.col("mode")?, c.col("value")?);
            let mut pairs: BTreeMap<(String, String), (f64, f64)> = BTreeMap::new();
            for r in &c.rows {
                let e = pairs.entry((r[scan].clone(), r[wl].clone())).or_insert((f64::NAN, f64::NAN));
                match r[mode].as_str() {
                    "noisy" => e.0 = c.num(r, val),
                    "denoised" => e.1 = c.num(r, val),
                    _ => {}
                }
            }
            let mut by_wl: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
            let mut gains = Vec::new();
            for ((_, w), (a, b)) in &pairs {
                if a.is_finite() && b.is_finite() {
                    let w: f64 = w.parse().unwrap_or(f64::NAN);
                    by_wl.entry(w.to_bits()).or_default().push((*a, *b));
                    gains.push(b - a);
                }
            }
            let mut rows: Vec<(f64, Vec<(f64, f64)>)> = by_wl.into_iter().map(|(k, v)| (f64::from_bits(k), v)).collect();
            rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut t = Table::create(
                out.join("cr_per_wavelength.csv"),
                &["wavelength", "n", "mean_cr_noisy", "mean_cr_denoised", "mean_gain", "improved_fraction"],
            )?;
            let mut noisy_curve = Vec::new();
            let mut den_curve = Vec::new();
            for (w, v) in &rows {
                let a: Vec<f64> = v.iter().map(|p| p.0).collect();
                let b: Vec<f64> = v.iter().map(|p| p.1).collect();
                let g: Vec<f64> = v.iter().map(|p| p.1 - p.0).collect();
                let frac = g.iter().filter(|&&x| x > 0.0).count() as f64 / g.len() as f64;
                t.row([
                    w.to_string(),
                    v.len().to_string(),
                    fmt_value(mean(&a)),
                    fmt_value(mean(&b)),
                    fmt_value(mean(&g)),
                    fmt_value(frac),
                ])?;
                noisy_curve.push((*w, mean(&a)));
                den_curve.push((*w, mean(&b)));
            }
            t.finish()?;
            render_lines(&[noisy_curve, den_curve], out.join("cr_per_wavelength.pgm"))?;
            emit(&mut rep, "cr_per_wavelength.csv");
            if gains.is_empty() {
                rep.verdicts.push(("contrast_resolution".into(), Verdict::Missing, "no paired CR values".into()));
            } else {
                let frac = gains.iter().filter(|&&g| g > 0.0).count() as f64 / gains.len() as f64;
                let m = mean(&gains);
                rep.verdicts.push((
                    "contrast_resolution".into(),
                    Verdict::of(frac >= CR_MIN_FRACTION && m > CR_MEAN_GAIN),
                    format!("improved_fraction={} mean_gain={} n={}", fmt_value(frac), fmt_value(m), gains.len()),
                ));
            }
        }
        None => rep.verdicts.push(("contrast_resolution".into(), Verdict::Missing, "cr.csv not found".into())),
    }

    if let Some(p) = &src.depth {
        let c = Csv::read(p)?;
        let depth = c.column("depth_m")?;
        let cols: Vec<String> = c.header.iter().filter(|h| h.starts_with("component_")).cloned().collect();
        let mut header = vec!["depth_m".to_string()];
        header.extend(cols.iter().cloned());
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut t = Table::create(out.join("depth_contributions.csv"), &refs)?;
        let series: Vec<Vec<f64>> = cols.iter().map(|h| c.column(h)).collect::<Result<_>>()?;
        for (i, d) in depth.iter().enumerate() {
            let mut row = vec![format!("{d:.6e}")];
            row.extend(series.iter().map(|s| fmt_value(s[i])));
            t.row(row)?;
        }
        t.finish()?;
        let lines: Vec<Vec<(f64, f64)>> = series
            .iter()
            .map(|s| depth.iter().copied().zip(s.iter().copied()).collect())
            .collect();
        render_lines(&lines, out.join("depth_contributions.pgm"))?;
        emit(&mut rep, "depth_contributions.csv");
    }

    let mut text = String::new();
    for (name, v, detail) in &rep.verdicts {
        text.push_str(&format!("{name}: {} {detail}\n", v.as_str()));
    }
    fs::write(out.join("summary.txt"), &text).map_err(|e| Error::io(out.join("summary.txt"), e))?;
    emit(&mut rep, "summary.txt");
    let mut w = rep.warnings.join("\n");
    if !w.is_empty() {
        w.push('\n');
    }
    fs::write(out.join("warnings.txt"), w).map_err(|e| Error::io(out.join("warnings.txt"), e))?;
    for warning in &rep.warnings {
        log::warn!("report: {warning}");
    }
    Ok(rep)
}
