//! Synthetic datasets: train/val/test splits of noise-free and noise
//! sinograms, or multispectral vessel phantoms.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;

use super::{prepare_output, require, Manifest, Timings, MANIFEST};
use crate::config::{DatasetMode, PipelineConfig};
use crate::dsp::preprocess;
use crate::error::{Error, Result};
use crate::forward::{simulate_corpus, CorpusOptions, ForwardOperator, ImageSource};
use crate::io::{read_image_stack, read_sinogram, read_sinogram_stack, write_image_stack, write_pgm, write_sinogram, write_sinogram_stack, KeyValue, Pgm};
use crate::metrics::{RoiLabel, RoiMask};
use crate::noise::{gen_parasitic_with, gen_thermal_with};
use crate::phantom::{feature_image, multispectral_images, vessel_phantom};
use crate::rng::{seeded_rng, OaRng};
use crate::types::{ImageGrid, MultispectralStack, Sinogram};

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Preprocessed thermal plus parasitic noise for one record.
pub(crate) fn electrical_noise(cfg: &PipelineConfig, rng: &mut OaRng) -> Result<Sinogram> {
    let shape = cfg.raw_shape();
    let fs = cfg.geometry.sample_rate_hz;
    let th = gen_thermal_with(&cfg.noise.thermal, shape, fs, rng);
    let par = gen_parasitic_with(&cfg.noise.parasitic, shape, fs, rng);
    preprocess(&th.with_data(th.data() + par.data())?, &cfg.bandpass, cfg.acquisition.n_samples)
}

/// Preprocessed white Gaussian noise of standard deviation `sigma`.
pub(crate) fn gaussian_noise(cfg: &PipelineConfig, sigma: f64, rng: &mut OaRng) -> Result<Sinogram> {
    let (d, t) = cfg.raw_shape();
    let data = Array2::from_shape_fn((d, t), |_| sigma * rng.normal());
    preprocess(&Sinogram::new(data, cfg.geometry.sample_rate_hz)?, &cfg.bandpass, cfg.acquisition.n_samples)
}

fn signal(cfg: &PipelineConfig, raw: &Sinogram) -> Result<Sinogram> {
    let amplified = raw.with_data(raw.data() * cfg.dataset.signal_gain)?;
    preprocess(&amplified, &cfg.bandpass, cfg.acquisition.n_samples)
}

fn image_sources(cfg: &PipelineConfig, image_dir: Option<&Path>) -> Result<Vec<ImageSource>> {
    let needed = cfg.dataset.total();
    match image_dir {
        Some(dir) => {
            let dir = require(dir)?;
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
                .collect();
            files.sort();
            if files.len() < needed {
                return Err(Error::Data(format!(
                    "split sizes {}/{}/{} exceed the corpus of {} images in {}",
                    cfg.dataset.n_train,
                    cfg.dataset.n_val,
                    cfg.dataset.n_test,
                    files.len(),
                    dir.display()
                )));
            }
            Ok(files.into_iter().map(ImageSource::Pgm).collect())
        }
        None => {
            let n = cfg.grid.n_x.max(cfg.grid.n_y);
            let root = seeded_rng(cfg.seed, "dataset/feature");
            Ok((0..needed)
                .into_par_iter()
                .map(|i| ImageSource::Array {
                    name: format!("procedural/{i:06}"),
                    pixels: feature_image(n, &mut root.child(&i.to_string())),
                })
                .collect())
        }
    }
}

fn item_path(split: &str, kind: &str, i: usize) -> String {
    format!("{split}/{kind}/{i:06}.oasg")
}

/// Writes the dataset selected by `cfg.dataset.mode` into `out`. Image
/// files are only read in the `en` and `gn` modes; without `image_dir`
/// procedural feature images are used.
pub fn cmd_make_dataset(cfg: &PipelineConfig, image_dir: Option<&Path>, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    prepare_output(out, "dataset")?;
    let mut timings = Timings::default();
    let mut manifest = Manifest::new("dataset", cfg)?;
    manifest.set("mode", cfg.dataset.mode.as_str());
    manifest.set("seed", cfg.seed.0);
    match cfg.dataset.mode {
        DatasetMode::Ph => timings.time("phantoms", || make_phantoms(cfg, out, &mut manifest))?,
        mode => timings.time("sinograms", || make_splits(cfg, mode, image_dir, out, &mut manifest))?,
    }
    manifest.finish(out, cfg)?;
    timings.write(out)?;
    Dataset::open(out)
}

fn make_splits(
    cfg: &PipelineConfig,
    mode: DatasetMode,
    image_dir: Option<&Path>,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<()> {
    let d = &cfg.dataset;
    let sources = image_sources(cfg, image_dir)?;
    let op = ForwardOperator::new(
        cfg.geometry.clone(),
        cfg.grid,
        cfg.acquisition.raw_samples,
        cfg.acquisition.raw_t_offset,
    )?;
    let corpus = simulate_corpus(
        &sources,
        &op,
        cfg.seed,
        CorpusOptions {
            shuffle: true,
            flips: d.flips,
        },
    );
    if corpus.items.len() < d.total() {
        return Err(Error::Data(format!(
            "split sizes {}/{}/{} exceed the {} usable images ({} skipped)",
            d.n_train,
            d.n_val,
            d.n_test,
            corpus.items.len(),
            corpus.skipped.len()
        )));
    }
    for (name, why) in &corpus.skipped {
        manifest.set(format!("skipped.{name}"), why.replace('\n', " "));
    }
    let sizes = [d.n_train, d.n_val, d.n_test];
    let noise_root = seeded_rng(cfg.seed, "dataset/noise");
    let mut start = 0;
    for (split, &n) in SPLITS.iter().zip(&sizes) {
        for kind in ["oa", "noise"] {
            super::create_dir(&out.join(split).join(kind))?;
        }
        let items = &corpus.items[start..start + n];
        start += n;
        let sigmas: Vec<Option<f64>> = items
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let mut rng = noise_root.child(&format!("{split}/{i}"));
                let (noise, sigma) = match mode {
                    DatasetMode::En => (electrical_noise(cfg, &mut rng)?, None),
                    _ => {
                        let sigma = match *split {
                            "train" => d.gn_train_sigma_max * (1.0 - rng.uniform()),
                            "val" => d.gn_train_sigma_max * (i + 1) as f64 / n as f64,
                            _ => 1.0,
                        };
                        (gaussian_noise(cfg, sigma, &mut rng)?, Some(sigma))
                    }
                };
                write_sinogram(&signal(cfg, &item.sinogram)?, out.join(item_path(split, "oa", i)))?;
                write_sinogram(&noise, out.join(item_path(split, "noise", i)))?;
                Ok(sigma)
            })
            .collect::<Result<_>>()?;
        manifest.set(format!("n_{split}"), n);
        for (i, (item, sigma)) in items.iter().zip(sigmas).enumerate() {
            let key = format!("item.{split}.{i:06}");
            manifest.set(format!("{key}.source"), &item.source);
            manifest.set(format!("{key}.noise_stream"), format!("dataset/noise/{split}/{i}"));
            if let Some(s) = sigma {
                manifest.set(format!("{key}.sigma"), s);
            }
        }
    }
    if mode == DatasetMode::Gn {
        let s: Vec<String> = d.gn_test_sigmas.iter().map(|s| s.to_string()).collect();
        manifest.set("test_sigmas", s.join(","));
        manifest.set("test_noise", "unit");
    }
    Ok(())
}

fn mask_pgm(mask: &RoiMask) -> Pgm {
    let (h, w) = mask.mask.dim();
    Pgm {
        width: w,
        height: h,
        maxval: 255,
        samples: mask.mask.iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
}

fn make_phantoms(cfg: &PipelineConfig, out: &Path, manifest: &mut Manifest) -> Result<()> {
    let grid = cfg.recon.grid;
    if grid.n_x != grid.n_y {
        return Err(Error::Config(format!(
            "phantoms need a square reconstruction grid, got {}x{}",
            grid.n_y, grid.n_x
        )));
    }
    let p = &cfg.phantoms;
    let op = ForwardOperator::new(
        cfg.geometry.clone(),
        grid,
        cfg.acquisition.raw_samples,
        cfg.acquisition.raw_t_offset,
    )?;
    let root = seeded_rng(cfg.seed, "dataset/phantom");
    (0..p.count).into_par_iter().try_for_each(|k| -> Result<()> {
        let dir = out.join(PhantomScan::dir_name(k));
        super::create_dir(&dir)?;
        let ph = vessel_phantom(grid.n_x, &mut root.child(&format!("layout/{k}")));
        let images = multispectral_images(&ph, &p.wavelengths, grid.pixel_size(), p.fluence_depth_m);
        let mut clean = Vec::new();
        let mut noise = Vec::new();
        let mut p0 = Vec::new();
        for (j, (&wl, img)) in p.wavelengths.iter().zip(images).enumerate() {
            let img = ImageGrid::new(img, grid.extent_m)?;
            let s = signal(cfg, &op.apply_forward(&img)?)?.with_wavelength(Some(wl));
            let n = electrical_noise(cfg, &mut root.child(&format!("noise/{k}/{j}")))?.with_wavelength(Some(wl));
            clean.push((wl, s));
            noise.push((wl, n));
            p0.push((wl, img));
        }
        let extra = KeyValue::default();
        write_sinogram_stack(&MultispectralStack::new(clean)?, dir.join("clean"), &extra)?;
        write_sinogram_stack(&MultispectralStack::new(noise)?, dir.join("noise"), &extra)?;
        write_image_stack(&MultispectralStack::new(p0)?, dir.join("p0"), &extra)?;
        write_pgm(&mask_pgm(&ph.vessels), dir.join("vessels.pgm"))?;
        write_pgm(&mask_pgm(&ph.background), dir.join("background.pgm"))
    })?;
    let wl: Vec<String> = p.wavelengths.iter().map(|w| w.to_string()).collect();
    manifest.set("n_scans", p.count);
    manifest.set("wavelengths", wl.join(","));
    Ok(())
}

/// One sample of a sinogram dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub source: String,
    pub oa: PathBuf,
    pub noise: PathBuf,
    /// Gaussian noise level of `gn` train and validation items.
    pub sigma: Option<f64>,
}

impl DatasetItem {
    pub fn load(&self) -> Result<(Sinogram, Sinogram)> {
        Ok((read_sinogram(require(&self.oa)?)?, read_sinogram(require(&self.noise)?)?))
    }
}

/// One phantom scan directory.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomScan {
    pub id: String,
    pub dir: PathBuf,
}

impl PhantomScan {
    pub fn dir_name(k: usize) -> String {
        format!("scan_{k:03}")
    }

    pub fn clean(&self) -> Result<MultispectralStack<Sinogram>> {
        Ok(read_sinogram_stack(self.dir.join("clean"))?.0)
    }

    pub fn noise(&self) -> Result<MultispectralStack<Sinogram>> {
        Ok(read_sinogram_stack(self.dir.join("noise"))?.0)
    }

    pub fn p0(&self) -> Result<MultispectralStack<ImageGrid>> {
        Ok(read_image_stack(self.dir.join("p0"))?.0)
    }

    pub fn masks(&self) -> Result<(RoiMask, RoiMask)> {
        Ok((
            RoiMask::from_pgm(require(self.dir.join("vessels.pgm"))?, RoiLabel::Vessel)?,
            RoiMask::from_pgm(require(self.dir.join("background.pgm"))?, RoiLabel::Background)?,
        ))
    }
}

/// A dataset directory written by [`cmd_make_dataset`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub mode: DatasetMode,
    pub manifest: KeyValue,
    pub train: Vec<DatasetItem>,
    pub val: Vec<DatasetItem>,
    pub test: Vec<DatasetItem>,
    /// Noise levels applied to the unit test noise in `gn` mode.
    pub test_sigmas: Vec<f64>,
    pub scans: Vec<PhantomScan>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = KeyValue::read(require(dir.join(MANIFEST))?)?;
        if manifest.get("stage") != Some("dataset") {
            return Err(Error::Data(format!("{} is not a dataset directory", dir.display())));
        }
        let mode = DatasetMode::parse(manifest.require("mode")?)?;
        let mut ds = Dataset {
            dir: dir.clone(),
            mode,
            manifest: manifest.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            test_sigmas: Vec::new(),
            scans: Vec::new(),
        };
        if mode == DatasetMode::Ph {
            let n: usize = manifest.parse_value("n_scans")?;
            ds.scans = (0..n)
                .map(|k| PhantomScan {
                    id: PhantomScan::dir_name(k),
                    dir: dir.join(PhantomScan::dir_name(k)),
                })
                .collect();
            return Ok(ds);
        }
        for split in SPLITS {
            let n: usize = manifest.parse_value(&format!("n_{split}"))?;
            let items = (0..n)
                .map(|i| {
                    let key = format!("item.{split}.{i:06}");
                    Ok(DatasetItem {
                        source: manifest.require(&format!("{key}.source"))?.to_string(),
                        oa: dir.join(item_path(split, "oa", i)),
                        noise: dir.join(item_path(split, "noise", i)),
                        sigma: manifest.get(&format!("{key}.sigma")).map(str::parse).transpose().map_err(|_| {
                            Error::Data(format!("{key}.sigma is not a number"))
                        })?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match split {
                "train" => ds.train = items,
                "val" => ds.val = items,
                _ => ds.test = items,
            }
        }
        if let Some(s) = manifest.get("test_sigmas") {
            ds.test_sigmas = s
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Data(format!("bad test sigma {v:?}"))))
                .collect::<Result<_>>()?;
        }
        Ok(ds)
    }

    /// The dataset manifest, which hashes every file.
    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST)
    }

    pub fn load_split(items: &[DatasetItem]) -> Result<Vec<(Sinogram, Sinogram)>> {
        items.par_iter().map(DatasetItem::load).collect()
    }
}
