//! Pipeline configuration: one TOML document with a section per stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::TrainConfig;
use crate::dsp::{crop_split, BandpassSpec};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::noise::{ParasiticNoiseSpec, ThermalNoiseSpec};
use crate::recon::ReconConfig;
use crate::rng::RngSeed;
use crate::types::{wavelength_grid, ArrayGeometry, GridSpec};
use crate::unmix::NmfConfig;

/// Environment variable that replaces `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "OATK_OUTPUT_ROOT";

/// Raw record length and its offset from the laser trigger; records are
/// band-passed then cropped to `n_samples`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub raw_samples: usize,
    pub raw_t_offset: i64,
    pub n_samples: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            raw_samples: 272,
            raw_t_offset: 1458,
            n_samples: 256,
        }
    }
}

impl AcquisitionConfig {
    /// Time offset of the first sample kept after cropping.
    pub fn cropped_t_offset(&self) -> i64 {
        self.raw_t_offset + crop_split(self.raw_samples, self.n_samples).0 as i64
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub thermal: ThermalNoiseSpec,
    pub parasitic: ParasiticNoiseSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    /// Thermal plus parasitic electrical noise.
    En,
    /// White Gaussian noise of varying level.
    Gn,
    /// Multispectral vessel phantoms with known regions.
    Ph,
}

impl DatasetMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetMode::En => "en",
            DatasetMode::Gn => "gn",
            DatasetMode::Ph => "ph",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "en" => Ok(DatasetMode::En),
            "gn" => Ok(DatasetMode::Gn),
            "ph" => Ok(DatasetMode::Ph),
            _ => Err(Error::Config(format!("unknown dataset mode {s:?}, expected en, gn or ph"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub mode: DatasetMode,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Multiplies simulated sinograms before noise is added.
    pub signal_gain: f64,
    pub flips: bool,
    /// Draw a new noise realisation at every training step instead of
    /// reusing the stored training noise.
    pub fresh_noise: bool,
    pub gn_train_sigma_max: f64,
    pub gn_test_sigmas: Vec<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            mode: DatasetMode::En,
            n_train: 2000,
            n_val: 32,
            n_test: 64,
            signal_gain: 3000.0,
            flips: true,
            fresh_noise: true,
            gn_train_sigma_max: 0.5,
            gn_test_sigmas: (0..=20).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl DatasetConfig {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// Multispectral vessel phantoms; their images live on the reconstruction
/// grid so region masks and reconstructions align.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub count: usize,
    pub wavelengths: Vec<f64>,
    /// Light penetration depth at 800 nm; scales linearly with wavelength.
    pub fluence_depth_m: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            count: 24,
            wavelengths: wavelength_grid(700.0, 970.0, 30.0),
            fluence_depth_m: 4e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub window_samples: usize,
    pub crop_samples: usize,
    pub excluded_channels: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            window_samples: 32,
            crop_samples: 256,
            excluded_channels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnmixConfig {
    pub depth_bin_m: f64,
    pub smooth_halfwidth_m: f64,
    /// Components whose relative contributions are profiled; all when
    /// empty.
    pub components: Vec<usize>,
}

impl Default for UnmixConfig {
    fn default() -> Self {
        UnmixConfig {
            depth_bin_m: 2.5e-4,
            smooth_halfwidth_m: 2.5e-4,
            components: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_transducers: usize,
    pub n_samples: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_transducers: 256,
            n_samples: 1808,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: RngSeed,
    pub output_dir: PathBuf,
    pub geometry: ArrayGeometry,
    pub grid: GridSpec,
    pub acquisition: AcquisitionConfig,
    pub bandpass: BandpassSpec,
    pub noise: NoiseConfig,
    pub dataset: DatasetConfig,
    pub phantoms: PhantomConfig,
    pub train: TrainConfig,
    pub recon: ReconConfig,
    pub nmf: NmfConfig,
    pub unmix: UnmixConfig,
    pub metrics: MetricsConfig,
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut train = TrainConfig::desk();
        train.arch.base_channels = 8;
        train.learning_rate = 1e-3;
        train.input_scale = 1.0;
        train.epochs = 2;
        train.decay_epochs = 1;
        let recon = ReconConfig {
            grid: GridSpec::square(64, 5e-3),
            max_iters: 100,
            ..Default::default()
        };
        let nmf = NmfConfig {
            k: 4,
            ..Default::default()
        };
        PipelineConfig {
            seed: RngSeed(0),
            output_dir: PathBuf::from("oatk-out"),
            geometry: ArrayGeometry::desk_64(),
            grid: GridSpec::square(128, 5e-3),
            acquisition: AcquisitionConfig::default(),
            bandpass: BandpassSpec::default(),
            noise: NoiseConfig::default(),
            dataset: DatasetConfig::default(),
            phantoms: PhantomConfig::default(),
            train,
            recon,
            nmf,
            unmix: UnmixConfig::default(),
            metrics: MetricsConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_override(spec: &str) -> Result<toml::Table> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override {spec:?} is not of the form section.key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("override {spec:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut table = toml::Table::new();
    table.insert(path[path.len() - 1].to_string(), value);
    for p in path[..path.len() - 1].iter().rev() {
        let mut outer = toml::Table::new();
        outer.insert(p.to_string(), toml::Value::Table(table));
        table = outer;
    }
    Ok(table)
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl PipelineConfig {
    /// Parses `text` over the defaults: keys missing from any section,
    /// including a partially given one, keep their default values.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// As [`from_toml`](Self::from_toml), then applies `section.key=value`
    /// overrides. Values are read as TOML, falling back to a bare string.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        for o in overrides {
            merge(&mut user, parse_override(o)?);
        }
        let mut merged = toml::Table::try_from(PipelineConfig::default()).map_err(|e| cfg_err(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: PipelineConfig = merged.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, &[])
    }

    pub fn load_with(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(format!("config is not representable as TOML: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// `output_dir`, or the value of [`OUTPUT_ROOT_ENV`] when set.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    /// Shape of one preprocessed sinogram.
    pub fn sinogram_shape(&self) -> (usize, usize) {
        (self.geometry.n_transducers, self.acquisition.n_samples)
    }

    pub fn raw_shape(&self) -> (usize, usize) {
        (self.geometry.n_transducers, self.acquisition.raw_samples)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.grid.validate()?;
        let fs = self.geometry.sample_rate_hz;
        self.bandpass.validate(fs)?;
        self.noise.thermal.validate()?;
        self.noise.parasitic.validate()?;
        self.noise.parasitic.check_band(fs)?;
        self.train.validate()?;
        self.recon.validate()?;
        self.nmf.validate()?;

        let acq = &self.acquisition;
        if acq.n_samples == 0 || acq.n_samples > acq.raw_samples {
            return Err(cfg_err(format!(
                "acquisition.n_samples {} must lie in 1..={}",
                acq.n_samples, acq.raw_samples
            )));
        }
        let (rows, cols) = self.sinogram_shape();
        self.train.arch.check_input(rows, cols).map_err(|e| {
            cfg_err(format!("denoiser architecture does not fit {rows}x{cols} sinograms: {e}"))
        })?;
        let b = &self.bench;
        self.train.arch.check_input(b.n_transducers, b.n_samples).map_err(|e| {
            cfg_err(format!("bench shape {}x{} does not fit the denoiser: {e}", b.n_transducers, b.n_samples))
        })?;
        if b.repeats == 0 {
            return Err(cfg_err("bench.repeats must be at least 1"));
        }

        let d = &self.dataset;
        if d.n_train == 0 || d.n_val == 0 || d.n_test == 0 {
            return Err(cfg_err("dataset split sizes must all be at least 1"));
        }
        if !(d.signal_gain > 0.0 && d.signal_gain.is_finite()) {
            return Err(cfg_err(format!("dataset.signal_gain must be positive, got {}", d.signal_gain)));
        }
        if !(d.gn_train_sigma_max > 0.0 && d.gn_train_sigma_max.is_finite()) {
            return Err(cfg_err("dataset.gn_train_sigma_max must be positive"));
        }
        if d.gn_test_sigmas.is_empty() || d.gn_test_sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(cfg_err("dataset.gn_test_sigmas must be a nonempty list of nonnegative values"));
        }

        let p = &self.phantoms;
        if p.count == 0 {
            return Err(cfg_err("phantoms.count must be at least 1"));
        }
        if p.wavelengths.is_empty() || p.wavelengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(cfg_err("phantoms.wavelengths must be nonempty and strictly increasing"));
        }
        if p.wavelengths.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(cfg_err("phantoms.wavelengths must be positive"));
        }
        if !(p.fluence_depth_m > 0.0 && p.fluence_depth_m.is_finite()) {
            return Err(cfg_err("phantoms.fluence_depth_m must be positive"));
        }

        let m = &self.metrics;
        if m.crop_samples == 0 || m.crop_samples > acq.n_samples {
            return Err(cfg_err(format!(
                "metrics.crop_samples {} must lie in 1..={}",
                m.crop_samples, acq.n_samples
            )));
        }
        if m.window_samples == 0 || m.window_samples > m.crop_samples {
            return Err(cfg_err(format!(
                "metrics.window_samples {} must lie in 1..={}",
                m.window_samples, m.crop_samples
            )));
        }
        if let Some(c) = m.excluded_channels.iter().find(|&&c| c >= rows) {
            return Err(cfg_err(format!("excluded channel {c} out of range for {rows} transducers")));
        }
        if m.excluded_channels.len() >= rows {
            return Err(cfg_err("every channel is excluded"));
        }

        let u = &self.unmix;
        if !(u.depth_bin_m > 0.0) || !(u.smooth_halfwidth_m >= 0.0) {
            return Err(cfg_err("unmix.depth_bin_m must be positive and smooth_halfwidth_m nonnegative"));
        }
        if let Some(c) = u.components.iter().find(|&&c| c >= self.nmf.k) {
            return Err(cfg_err(format!("unmix component {c} out of range for k = {}", self.nmf.k)));
        }
        Ok(())
    }
}
