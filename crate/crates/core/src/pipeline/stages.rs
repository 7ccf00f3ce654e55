//! Train, denoise, reconstruct, metrics and unmix stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use super::dataset::{electrical_noise, gaussian_noise};
use super::{prepare_output, require, walk_files, Dataset, Manifest, Timings, MANIFEST};
use crate::config::{DatasetMode, PipelineConfig};
use crate::denoiser::{infer_noise, load_model, save_model, train_with_validation, write_train_log, DenoiserModel, NoiseSource, TrainOutcome};
use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::io::{
    read_image_stack, read_sinogram, read_sinogram_stack, write_image, write_image_stack, write_preview, write_sinogram,
    write_sinogram_stack, KeyValue,
};
use crate::metrics::{
    contrast_resolution, fmt_value, snr, snr_mean, write_curve, write_metric_rows, ChannelMask, MeanMode, MetricRow,
};
use crate::noise::NoisyPair;
use crate::recon::{reconstruct, LambdaScale, ReconConfig};
use crate::types::{ImageGrid, MultispectralStack, Sinogram};
use crate::unmix::{
    assemble_spectra, depth_profiles, match_components, nmf_factorize, synthetic_reference_spectra,
    write_depth_profiles_csv, write_spectra_csv,
};

pub(crate) struct Table {
    path: PathBuf,
    w: csv::Writer<std::fs::File>,
}

impl Table {
    pub(crate) fn create(path: PathBuf, header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        w.write_record(header).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(Table { path, w })
    }

    pub(crate) fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) -> Result<()> {
        let rec: Vec<String> = fields.into_iter().collect();
        self.w.write_record(&rec).map_err(|e| Error::Data(format!("{}: {e}", self.path.display())))
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn hash_bytes(hex_hash: &str) -> Result<[u8; 32]> {
    let v = hex::decode(hex_hash).map_err(|e| Error::Data(format!("bad hash {hex_hash:?}: {e}")))?;
    v.try_into().map_err(|_| Error::Data("hash is not 32 bytes".into()))
}

fn noisy_pair(oa: &Sinogram, noise: Sinogram) -> Result<NoisyPair> {
    Ok(NoisyPair {
        noisy: oa.with_data(oa.data() + noise.data())?,
        noise,
    })
}

/// Trains a denoiser on an `en` or `gn` dataset and writes
/// `model.oaml` and `train_log.csv`.
pub fn cmd_train(cfg: &PipelineConfig, dataset_dir: &Path, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = Dataset::open(require(dataset_dir)?)?;
    if ds.mode == DatasetMode::Ph {
        return Err(Error::Data(format!("{} holds phantoms; training needs an en or gn dataset", dataset_dir.display())));
    }
    prepare_output(out, "train")?;
    let mut timings = Timings::default();
    let train = Dataset::load_split(&ds.train)?;
    let val = Dataset::load_split(&ds.val)?
        .into_iter()
        .map(|(oa, n)| noisy_pair(&oa, n))
        .collect::<Result<Vec<_>>>()?;
    let (oa, stored_noise): (Vec<Sinogram>, Vec<Sinogram>) = train.into_iter().unzip();
    let source = if cfg.dataset.fresh_noise {
        let c = Arc::new(cfg.clone());
        match ds.mode {
            DatasetMode::En => NoiseSource::Generator(Box::new(move |rng| electrical_noise(&c, rng))),
            _ => NoiseSource::Generator(Box::new(move |rng| {
                let sigma = c.dataset.gn_train_sigma_max * (1.0 - rng.uniform());
                gaussian_noise(&c, sigma, rng)
            })),
        }
    } else {
        NoiseSource::Corpus(stored_noise)
    };
    let t = Instant::now();
    let mut outcome = train_with_validation(&oa, &source, &val, &cfg.train)?;
    let secs = t.elapsed().as_secs_f64();
    timings.record("training", secs);
    let steps = cfg.train.epochs * cfg.train.steps_per_epoch.unwrap_or(oa.len());
    timings.record("per_step", secs / steps.max(1) as f64);
    outcome.model.fingerprint.config_hash = hash_bytes(&cfg.hash()?)?;
    save_model(&outcome.model, out.join("model.oaml"))?;
    write_train_log(&outcome.log, out.join("train_log.csv"))?;

    let mut manifest = Manifest::new("train", cfg)?;
    manifest.input("dataset", &ds.dir)?;
    manifest.set("best_epoch", outcome.best_epoch);
    manifest.set("best_val_loss", fmt_value(outcome.model.fingerprint.val_loss));
    manifest.set("n_weights", outcome.model.n_weights());
    manifest.set("noise_source", if cfg.dataset.fresh_noise { "fresh" } else { "stored" });
    manifest.finish(out, cfg)?;
    timings.write(out)?;
    Ok(outcome)
}

/// Aggregate of a denoising run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DenoiseSummary {
    /// Per-sinogram SNR gains in dB, when ground truth is available.
    pub gains_db: Vec<f64>,
    pub sinograms: usize,
    pub mean_latency_s: f64,
}

struct Denoised {
    noise_hat: Sinogram,
    seconds: f64,
}

fn run_model(model: &DenoiserModel, s: &Sinogram) -> Result<Denoised> {
    let t = Instant::now();
    let noise_hat = infer_noise(model, s)?;
    Ok(Denoised {
        noise_hat,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn snr_pair(pair: &NoisyPair, noise_hat: &Sinogram, mask: &ChannelMask) -> Result<(f64, f64)> {
    let zero = pair.noise.with_data(pair.noise.data() * 0.0)?;
    Ok((snr(&pair.noisy, &pair.noise, &zero, mask)?, snr(&pair.noisy, &pair.noise, noise_hat, mask)?))
}

fn denoise_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Denoises a dataset's test split (or every phantom scan), or any
/// directory of sinograms and sinogram stacks.
///
/// On `en` data `snr.csv` holds per-sinogram SNR before and after. On `gn`
/// data every test sinogram is evaluated at each configured noise level
/// and `snr_sweep.csv` holds the per-level means. Phantom scans produce
/// `noisy/` and `denoised/` stacks, `phantom_snr.csv` and the mean-SNR
/// curves.
pub fn cmd_denoise(cfg: &PipelineConfig, model_path: &Path, input: &Path, out: &Path) -> Result<DenoiseSummary> {
    cfg.validate()?;
    let model = load_model(require(model_path)?)?;
    require(input)?;
    let dataset = if input.join(MANIFEST).exists()
        && KeyValue::read(input.join(MANIFEST))?.get("stage") == Some("dataset")
    {
        Some(Dataset::open(input)?)
    } else {
        None
    };
    prepare_output(out, "denoise")?;
    let mask = ChannelMask::excluding(cfg.geometry.n_transducers, &cfg.metrics.excluded_channels)?;
    let mut manifest = Manifest::new("denoise", cfg)?;
    manifest.input("model", model_path)?;
    let summary = match &dataset {
        Some(ds) => {
            manifest.input("dataset", &ds.dir)?;
            manifest.set("mode", ds.mode.as_str());
            match ds.mode {
                DatasetMode::En => denoise_en(ds, &model, &mask, out)?,
                DatasetMode::Gn => denoise_gn(ds, &model, &mask, out)?,
                DatasetMode::Ph => denoise_ph(cfg, ds, &model, &mask, out)?,
            }
        }
        None => {
            if input.is_file() || input.join(MANIFEST).exists() {
                manifest.input("sinograms", input)?;
            }
            denoise_files(&model, input, out)?
        }
    };
    if !summary.gains_db.is_empty() {
        manifest.set("mean_gain_db", fmt_value(denoise_mean(&summary.gains_db)));
        manifest.set("min_gain_db", fmt_value(summary.gains_db.iter().copied().fold(f64::INFINITY, f64::min)));
    }
    manifest.set("sinograms", summary.sinograms);
    manifest.finish(out, cfg)?;
    let mut timings = Timings::default();
    timings.record("inference_mean_per_sinogram", summary.mean_latency_s);
    timings.write(out)?;
    Ok(summary)
}

fn denoise_en(ds: &Dataset, model: &DenoiserModel, mask: &ChannelMask, out: &Path) -> Result<DenoiseSummary> {
    super::create_dir(&out.join("denoised"))?;
    let rows: Vec<(f64, f64, f64)> = ds
        .test
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let (oa, noise) = item.load()?;
            let pair = noisy_pair(&oa, noise)?;
            let d = run_model(model, &pair.noisy)?;
            let (before, after) = snr_pair(&pair, &d.noise_hat, mask)?;
            let clean = pair.noisy.with_data(pair.noisy.data() - d.noise_hat.data())?;
            write_sinogram(&clean, out.join("denoised").join(format!("{i:06}.oasg")))?;
            Ok((before, after, d.seconds))
        })
        .collect::<Result<_>>()?;
    let mut t = Table::create(out.join("snr.csv"), &["item", "source", "snr_before_db", "snr_after_db", "gain_db"])?;
    let mut gains = Vec::new();
    for (i, (item, &(before, after, _))) in ds.test.iter().zip(&rows).enumerate() {
        gains.push(after - before);
        t.row([i.to_string(), item.source.clone(), fmt_value(before), fmt_value(after), fmt_value(after - before)])?;
    }
    t.finish()?;
    Ok(DenoiseSummary {
        gains_db: gains,
        sinograms: rows.len(),
        mean_latency_s: denoise_mean(&rows.iter().map(|r| r.2).collect::<Vec<_>>()),
    })
}

fn denoise_gn(ds: &Dataset, model: &DenoiserModel, mask: &ChannelMask, out: &Path) -> Result<DenoiseSummary> {
    if ds.test_sigmas.is_empty() {
        return Err(Error::Data(format!("{} lists no test sigmas", ds.dir.display())));
    }
    let test = Dataset::load_split(&ds.test)?;
    let mut per_item = Table::create(
        out.join("snr.csv"),
        &["item", "sigma", "snr_before_db", "snr_after_db", "gain_db"],
    )?;
    let mut sweep = Table::create(
        out.join("snr_sweep.csv"),
        &["sigma", "n", "mean_snr_before_db", "mean_snr_after_db", "mean_gain_db", "min_gain_db"],
    )?;
    let mut latencies = Vec::new();
    let mut gains_in_range = Vec::new();
    for &sigma in &ds.test_sigmas {
        let rows: Vec<(f64, f64, f64)> = test
            .par_iter()
            .map(|(oa, unit)| {
                let pair = noisy_pair(oa, unit.with_data(unit.data() * sigma)?)?;
                let d = run_model(model, &pair.noisy)?;
                let (b, a) = snr_pair(&pair, &d.noise_hat, mask)?;
                Ok((b, a, d.seconds))
            })
            .collect::<Result<_>>()?;
        for (i, &(b, a, s)) in rows.iter().enumerate() {
            per_item.row([i.to_string(), sigma.to_string(), fmt_value(b), fmt_value(a), fmt_value(a - b)])?;
            latencies.push(s);
        }
        let before: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let after: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let gains: Vec<f64> = rows.iter().map(|r| r.1 - r.0).collect();
        if sigma > 0.0 {
            gains_in_range.extend(&gains);
        }
        sweep.row([
            sigma.to_string(),
            rows.len().to_string(),
            fmt_value(denoise_mean(&before)),
            fmt_value(denoise_mean(&after)),
            fmt_value(denoise_mean(&gains)),
            fmt_value(gains.iter().copied().fold(f64::INFINITY, f64::min)),
        ])?;
    }
    per_item.finish()?;
    sweep.finish()?;
    Ok(DenoiseSummary {
        gains_db: gains_in_range,
        sinograms: latencies.len(),
        mean_latency_s: denoise_mean(&latencies),
    })
}

fn denoise_ph(
    cfg: &PipelineConfig,
    ds: &Dataset,
    model: &DenoiserModel,
    mask: &ChannelMask,
    out: &Path,
) -> Result<DenoiseSummary> {
    type Row = (f64, f64, f64, f64);
    let per_scan: Vec<(Vec<Row>, Vec<Sinogram>, Vec<Sinogram>)> = ds
        .scans
        .par_iter()
        .map(|scan| {
            let clean = scan.clean()?;
            let noise = scan.noise()?;
            let mut rows = Vec::new();
            let mut noisy_entries = Vec::new();
            let mut denoised_entries = Vec::new();
            for ((wl, oa), (_, n)) in clean.entries().iter().zip(noise.entries()) {
                let pair = noisy_pair(oa, n.clone())?;
                let d = run_model(model, &pair.noisy)?;
                let (b, a) = snr_pair(&pair, &d.noise_hat, mask)?;
                rows.push((*wl, b, a, d.seconds));
                let den = pair.noisy.with_data(pair.noisy.data() - d.noise_hat.data())?;
                noisy_entries.push((*wl, pair.noisy));
                denoised_entries.push((*wl, den));
            }
            let extra = KeyValue::default();
            let noisy_stack = MultispectralStack::new(noisy_entries)?;
            let den_stack = MultispectralStack::new(denoised_entries)?;
            write_sinogram_stack(&noisy_stack, out.join("noisy").join(&scan.id), &extra)?;
            write_sinogram_stack(&den_stack, out.join("denoised").join(&scan.id), &extra)?;
            let take = |s: MultispectralStack<Sinogram>| s.into_entries().into_iter().map(|e| e.1).collect();
            Ok((rows, take(noisy_stack), take(den_stack)))
        })
        .collect::<Result<_>>()?;
    let mut t = Table::create(
        out.join("phantom_snr.csv"),
        &["scan_id", "wavelength", "snr_before_db", "snr_after_db", "gain_db"],
    )?;
    let mut gains = Vec::new();
    let mut latencies = Vec::new();
    let mut noisy_all = Vec::new();
    let mut den_all = Vec::new();
    for (scan, (rows, noisy, den)) in ds.scans.iter().zip(per_scan) {
        for (wl, b, a, s) in rows {
            t.row([scan.id.clone(), wl.to_string(), fmt_value(b), fmt_value(a), fmt_value(a - b)])?;
            gains.push(a - b);
            latencies.push(s);
        }
        noisy_all.extend(noisy);
        den_all.extend(den);
    }
    t.finish()?;
    let m = &cfg.metrics;
    let mut whole = Vec::new();
    for mode in [MeanMode::Whole, MeanMode::PerTime, MeanMode::PerTransducer] {
        let curve = snr_mean(&noisy_all, &den_all, m.window_samples, m.crop_samples, mask, mode)?;
        match mode {
            MeanMode::Whole => whole.push(MetricRow {
                scan_id: "all".into(),
                wavelength_nm: None,
                metric: "snr_mean".into(),
                mode: mode.as_str().into(),
                value: curve.values_db[0],
            }),
            _ => write_curve(&curve.index, &curve.values_db, out.join(format!("snr_mean_{}.csv", mode.as_str())))?,
        }
    }
    write_metric_rows(&whole, out.join("snr_mean.csv"))?;
    Ok(DenoiseSummary {
        gains_db: gains,
        sinograms: latencies.len(),
        mean_latency_s: denoise_mean(&latencies),
    })
}

/// Stack directories (holding a stack manifest with entries of `ext`)
/// and loose `ext` files below `input`, as paths relative to it.
fn collect_inputs(input: &Path, ext: &str) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    if input.is_file() {
        return Ok((Vec::new(), vec![PathBuf::new()]));
    }
    let files = walk_files(input)?;
    let mut stacks = Vec::new();
    for f in &files {
        if f.file_name().is_some_and(|n| n == MANIFEST) {
            let kv = KeyValue::read(input.join(f))?;
            if kv.get("files").is_some_and(|v| v.split(',').all(|x| x.trim().ends_with(ext))) {
                stacks.push(f.parent().map(Path::to_path_buf).unwrap_or_default());
            }
        }
    }
    let loose = files
        .into_iter()
        .filter(|f| f.extension().is_some_and(|x| x == ext))
        .filter(|f| !stacks.iter().any(|s| f.parent() == Some(s.as_path())))
        .collect();
    Ok((stacks, loose))
}

fn join_rel(base: &Path, rel: &Path) -> PathBuf {
    if rel.as_os_str().is_empty() {
        base.to_path_buf()
    } else {
        base.join(rel)
    }
}

fn denoise_files(model: &DenoiserModel, input: &Path, out: &Path) -> Result<DenoiseSummary> {
    let (stacks, loose) = collect_inputs(input, "oasg")?;
    if stacks.is_empty() && loose.is_empty() {
        return Err(Error::Data(format!("no sinograms found under {}", input.display())));
    }
    let mut latencies = Vec::new();
    for rel in &stacks {
        let (stack, kv) = read_sinogram_stack(input.join(rel))?;
        let entries: Vec<(f64, Sinogram, f64)> = stack
            .entries()
            .par_iter()
            .map(|(wl, s)| {
                let d = run_model(model, s)?;
                Ok((*wl, s.with_data(s.data() - d.noise_hat.data())?, d.seconds))
            })
            .collect::<Result<_>>()?;
        latencies.extend(entries.iter().map(|e| e.2));
        let stack = MultispectralStack::new(entries.into_iter().map(|e| (e.0, e.1)).collect())?;
        write_sinogram_stack(&stack, out.join(rel), &kv)?;
    }
    let single = input.is_file();
    let loose_lat: Vec<f64> = loose
        .par_iter()
        .map(|rel| {
            let src = join_rel(input, rel);
            let s = read_sinogram(&src)?;
            let d = run_model(model, &s)?;
            let dst = if single { out.join(input.file_name().expect("file input has a name")) } else { out.join(rel) };
            if let Some(parent) = dst.parent() {
                super::create_dir(parent)?;
            }
            write_sinogram(&s.with_data(s.data() - d.noise_hat.data())?, dst)?;
            Ok(d.seconds)
        })
        .collect::<Result<_>>()?;
    latencies.extend(loose_lat);
    Ok(DenoiseSummary {
        gains_db: Vec::new(),
        sinograms: latencies.len(),
        mean_latency_s: denoise_mean(&latencies),
    })
}

/// Operators and resolved regularisation weights, one per record length.
struct Reconstructor<'a> {
    cfg: &'a PipelineConfig,
    ops: BTreeMap<usize, (ForwardOperator, ReconConfig)>,
}

impl<'a> Reconstructor<'a> {
    fn new(cfg: &'a PipelineConfig) -> Self {
        Reconstructor {
            cfg,
            ops: BTreeMap::new(),
        }
    }

    fn prepare(&mut self, n_samples: usize) -> Result<()> {
        if !self.ops.contains_key(&n_samples) {
            let op = ForwardOperator::new(
                self.cfg.geometry.clone(),
                self.cfg.recon.grid,
                n_samples,
                self.cfg.acquisition.cropped_t_offset(),
            )?;
            let (l1, l2) = self.cfg.recon.resolve_lambdas(&op);
            let rc = ReconConfig {
                lambda_tikhonov: l1,
                lambda_laplacian: l2,
                lambda_scale: LambdaScale::Absolute,
                ..self.cfg.recon.clone()
            };
            self.ops.insert(n_samples, (op, rc));
        }
        Ok(())
    }

    fn run(&self, s: &Sinogram) -> Result<(ImageGrid, usize, f64, bool)> {
        let (op, rc) = &self.ops[&s.n_samples()];
        if s.n_transducers() != op.geometry().n_transducers {
            return Err(Error::Shape(format!(
                "sinogram has {} transducers but the geometry has {}",
                s.n_transducers(),
                op.geometry().n_transducers
            )));
        }
        let r = reconstruct(s, op, rc)?;
        Ok((r.image, r.trace.iterations.len(), r.trace.final_objective(), r.trace.converged))
    }
}

/// Reconstructs every sinogram stack and loose sinogram under `input`,
/// mirroring the layout into `out` with previews and a solver trace.
pub fn cmd_reconstruct(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<usize> {
    cfg.validate()?;
    require(input)?;
    let (stacks, loose) = collect_inputs(input, "oasg")?;
    if stacks.is_empty() && loose.is_empty() {
        return Err(Error::Data(format!("no sinograms found under {}", input.display())));
    }
    prepare_output(out, "reconstruct")?;
    let mut rec = Reconstructor::new(cfg);
    let mut jobs: Vec<(PathBuf, Option<KeyValue>, Vec<(f64, Sinogram)>)> = Vec::new();
    for rel in &stacks {
        let (stack, kv) = read_sinogram_stack(input.join(rel))?;
        jobs.push((rel.clone(), Some(kv), stack.into_entries()));
    }
    for rel in &loose {
        let s = read_sinogram(join_rel(input, rel))?;
        let name = if rel.as_os_str().is_empty() { PathBuf::from(input.file_name().expect("named input")) } else { rel.clone() };
        jobs.push((name.with_extension(""), None, vec![(s.wavelength_nm().unwrap_or(f64::NAN), s)]));
    }
    for (_, _, entries) in &jobs {
        for (_, s) in entries {
            rec.prepare(s.n_samples())?;
        }
    }
    let started = Instant::now();
    let flat: Vec<(usize, usize)> = jobs
        .iter()
        .enumerate()
        .flat_map(|(j, (_, _, e))| (0..e.len()).map(move |k| (j, k)))
        .collect();
    let results: Vec<(ImageGrid, usize, f64, bool)> =
        flat.par_iter().map(|&(j, k)| rec.run(&jobs[j].2[k].1)).collect::<Result<_>>()?;
    let mut results = results.into_iter();
    let mut count = 0;
    for (rel, kv, entries) in &jobs {
        let dir = out.join(rel);
        super::create_dir(&dir)?;
        let mut trace = Table::create(
            dir.join("trace.csv"),
            &["index", "wavelength", "iterations", "final_objective", "converged"],
        )?;
        let mut images = Vec::new();
        for (i, (wl, _)) in entries.iter().enumerate() {
            let (img, iters, obj, conv) = results.next().expect("one result per job");
            trace.row([i.to_string(), wl.to_string(), iters.to_string(), fmt_value(obj), conv.to_string()])?;
            write_preview(img.pixels(), dir.join(format!("preview_{i:03}.pgm")), "linear")?;
            images.push((*wl, img));
        }
        trace.finish()?;
        count += images.len();
        match kv {
            Some(kv) => {
                let mut extra = KeyValue::default();
                for (k, v) in kv.iter().filter(|(k, _)| !["count", "wavelengths", "dims", "files"].contains(k)) {
                    extra.set(k, v);
                }
                write_image_stack(&MultispectralStack::new(images)?, &dir, &extra)?;
            }
            None => write_image(&images[0].1, dir.join("image.oaim"))?,
        }
    }
    let mut manifest = Manifest::new("reconstruct", cfg)?;
    if input.is_file() || input.join(MANIFEST).exists() {
        manifest.input("sinograms", input)?;
    }
    for (n, (_, rc)) in &rec.ops {
        manifest.set(format!("lambda_tikhonov.{n}"), fmt_value(rc.lambda_tikhonov));
        manifest.set(format!("lambda_laplacian.{n}"), fmt_value(rc.lambda_laplacian));
    }
    manifest.set("images", count);
    manifest.finish(out, cfg)?;
    let mut timings = Timings::default();
    let secs = started.elapsed().as_secs_f64();
    timings.record("reconstruction", secs);
    timings.record("per_image", secs / count.max(1) as f64);
    timings.write(out)?;
    Ok(count)
}

/// Contrast-resolution summary over phantom scans.
#[derive(Debug, Clone, PartialEq)]
pub struct CrSummary {
    /// `(scan, wavelength, CR noisy, CR denoised)`.
    pub rows: Vec<(String, f64, Option<f64>, Option<f64>)>,
}

impl CrSummary {
    pub fn gains(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|(_, _, a, b)| Some(b.as_ref()? - a.as_ref()?))
            .collect()
    }
}

/// Contrast resolution of the `noisy/` and `denoised/` reconstructions of
/// every phantom scan, written to `cr.csv`.
pub fn cmd_metrics(cfg: &PipelineConfig, dataset_dir: &Path, recon_dir: &Path, out: &Path) -> Result<CrSummary> {
    cfg.validate()?;
    let ds = Dataset::open(require(dataset_dir)?)?;
    if ds.mode != DatasetMode::Ph {
        return Err(Error::Data(format!("{} holds no phantoms", dataset_dir.display())));
    }
    require(recon_dir)?;
    let variants = ["noisy", "denoised"];
    let per_scan: Vec<Vec<(f64, Option<f64>, Option<f64>)>> = ds
        .scans
        .par_iter()
        .map(|scan| {
            let (vessels, background) = scan.masks()?;
            let mut cr: Vec<Vec<(f64, Option<f64>)>> = Vec::new();
            for v in variants {
                let dir = require(recon_dir.join(v).join(&scan.id))?;
                let (stack, _) = read_image_stack(&dir)?;
                cr.push(
                    stack
                        .entries()
                        .iter()
                        .map(|(wl, img)| Ok((*wl, contrast_resolution(img, &vessels, &background)?)))
                        .collect::<Result<_>>()?,
                );
            }
            Ok(cr[0].iter().zip(&cr[1]).map(|(a, b)| (a.0, a.1, b.1)).collect())
        })
        .collect::<Result<_>>()?;
    prepare_output(out, "metrics")?;
    let mut rows = Vec::new();
    let mut summary = CrSummary { rows: Vec::new() };
    for (scan, list) in ds.scans.iter().zip(per_scan) {
        for (wl, a, b) in list {
            for (mode, v) in variants.iter().zip([a, b]) {
                rows.push(MetricRow {
                    scan_id: scan.id.clone(),
                    wavelength_nm: Some(wl),
                    metric: "cr".into(),
                    mode: mode.to_string(),
                    value: v.unwrap_or(f64::NAN),
                });
            }
            summary.rows.push((scan.id.clone(), wl, a, b));
        }
    }
    write_metric_rows(&rows, out.join("cr.csv"))?;
    let gains = summary.gains();
    let mut manifest = Manifest::new("metrics", cfg)?;
    manifest.input("dataset", &ds.dir)?;
    if recon_dir.join(MANIFEST).exists() {
        manifest.input("reconstructions", recon_dir)?;
    }
    manifest.set("cr_pairs", gains.len());
    manifest.set("cr_mean_gain", fmt_value(denoise_mean(&gains)));
    manifest.set(
        "cr_improved_fraction",
        fmt_value(gains.iter().filter(|&&g| g > 0.0).count() as f64 / gains.len().max(1) as f64),
    );
    manifest.finish(out, cfg)?;
    Timings::default().write(out)?;
    Ok(summary)
}

/// Outcome of [`cmd_unmix`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnmixSummary {
    pub scans: Vec<PathBuf>,
    pub objective: f64,
    pub relative_error: f64,
}

/// NMF over all reconstructed image stacks under `input`: spectra,
/// coefficient maps per scan and depth profiles.
pub fn cmd_unmix(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<UnmixSummary> {
    cfg.validate()?;
    require(input)?;
    let (stacks, _) = collect_inputs(input, "oaim")?;
    if stacks.is_empty() {
        return Err(Error::Data(format!("no reconstructed image stacks under {}", input.display())));
    }
    let loaded: Vec<MultispectralStack<ImageGrid>> =
        stacks.iter().map(|rel| Ok(read_image_stack(input.join(rel))?.0)).collect::<Result<_>>()?;
    let mut timings = Timings::default();
    let spectra = assemble_spectra(&loaded)?;
    let result = timings.time("nmf", || nmf_factorize(&spectra, &cfg.nmf))?;
    prepare_output(out, "unmix")?;
    write_spectra_csv(&result.h, &spectra.wavelengths, out.join("spectra.csv"))?;

    let refs = synthetic_reference_spectra(&spectra.wavelengths);
    let mut t = Table::create(out.join("matches.csv"), &["component", "reference", "correlation"])?;
    for m in match_components(&result.h, &refs) {
        t.row([m.component.to_string(), m.reference, fmt_value(m.correlation)])?;
    }
    t.finish()?;

    let mut t = Table::create(out.join("objective.csv"), &["pass", "objective"])?;
    for (i, v) in result.trace.iter().enumerate() {
        t.row([i.to_string(), fmt_value(*v)])?;
    }
    t.finish()?;

    let maps = out.join("maps");
    super::create_dir(&maps)?;
    let extent = loaded[0].entries()[0].1.extent_m();
    for (s, rel) in stacks.iter().enumerate() {
        let tag = rel.to_string_lossy().replace(['/', '\\'], "_");
        let tag = if tag.is_empty() { "scan".to_string() } else { tag };
        for c in 0..result.w.ncols() {
            let img = spectra.to_image(&result.w.column(c).to_vec(), s)?;
            write_preview(&img, maps.join(format!("{tag}_c{c}.pgm")), "linear")?;
            write_image(&ImageGrid::new(img, extent)?, maps.join(format!("{tag}_c{c}.oaim")))?;
        }
    }

    let selected: Vec<usize> = if cfg.unmix.components.is_empty() {
        (0..result.w.ncols()).collect()
    } else {
        cfg.unmix.components.clone()
    };
    let profiles = depth_profiles(
        &result,
        &selected,
        &spectra.pixel_depths(),
        cfg.unmix.depth_bin_m,
        cfg.unmix.smooth_halfwidth_m,
    )?;
    write_depth_profiles_csv(&profiles, out.join("depth_profiles.csv"))?;

    let mut manifest = Manifest::new("unmix", cfg)?;
    if input.join(MANIFEST).exists() {
        manifest.input("reconstructions", input)?;
    }
    manifest.set("scans", stacks.len());
    manifest.set("objective", fmt_value(result.objective));
    manifest.set("relative_error", fmt_value(result.relative_error));
    manifest.set("restart", result.restart);
    manifest.set("clamped_pixels", spectra.clamped);
    manifest.finish(out, cfg)?;
    timings.write(out)?;
    Ok(UnmixSummary {
        scans: stacks,
        objective: result.objective,
        relative_error: result.relative_error,
    })
}
