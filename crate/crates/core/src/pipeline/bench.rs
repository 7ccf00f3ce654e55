//! Inference latency at a configurable sinogram shape.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;

use super::stages::Table;
use super::{prepare_output, require, Manifest, Timings};
use crate::config::PipelineConfig;
use crate::denoiser::{infer_noise, load_model, DenoiserModel};
use crate::error::Result;
use crate::rng::seeded_rng;
use crate::types::Sinogram;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub shape: (usize, usize),
    pub seconds: Vec<f64>,
}

impl BenchReport {
    pub fn mean_s(&self) -> f64 {
        self.seconds.iter().sum::<f64>() / self.seconds.len() as f64
    }
}

/// Times `bench.repeats` inferences after one warm-up run. Without a
/// model file a freshly initialised network of the configured
/// architecture is timed.
pub fn cmd_bench(cfg: &PipelineConfig, model_path: Option<&Path>, out: &Path) -> Result<BenchReport> {
    cfg.validate()?;
    let model = match model_path {
        Some(p) => load_model(require(p)?)?,
        None => DenoiserModel::init(cfg.train.arch, cfg.train.input_scale, &mut seeded_rng(cfg.seed, "bench/init"))?,
    };
    let shape = (cfg.bench.n_transducers, cfg.bench.n_samples);
    model.arch.check_input(shape.0, shape.1)?;
    let mut rng = seeded_rng(cfg.seed, "bench/input");
    let data = Array2::from_shape_fn(shape, |_| cfg.noise.thermal.sigma * rng.normal());
    let s = Sinogram::new(data, cfg.geometry.sample_rate_hz)?;
    prepare_output(out, "bench")?;
    infer_noise(&model, &s)?;
    let seconds = (0..cfg.bench.repeats)
        .map(|_| {
            let t = Instant::now();
            infer_noise(&model, &s)?;
            Ok(t.elapsed().as_secs_f64())
        })
        .collect::<Result<Vec<_>>>()?;
    let report = BenchReport { shape, seconds };
    let mut t = Table::create(out.join("bench.csv"), &["repeat", "n_transducers", "n_samples", "seconds"])?;
    for (i, s) in report.seconds.iter().enumerate() {
        t.row([i.to_string(), shape.0.to_string(), shape.1.to_string(), format!("{s:.6}")])?;
    }
    t.finish()?;
    let mut timings = Timings::default();
    timings.record("per_sinogram_mean", report.mean_s());
    timings.write(out)?;
    let mut manifest = Manifest::new("bench", cfg)?;
    if let Some(p) = model_path {
        manifest.input("model", p)?;
    }
    manifest.set("shape", format!("{}x{}", shape.0, shape.1));
    manifest.set("repeats", cfg.bench.repeats);
    manifest.set("n_weights", model.n_weights());
    manifest.finish(out, cfg)?;
    log::info!(
        "bench {}x{}: {:.1} ms per sinogram",
        shape.0,
        shape.1,
        1e3 * report.mean_s()
    );
    Ok(report)
}
