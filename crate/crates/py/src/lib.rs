//! Python bindings: sinogram I/O, metrics, the forward model, denoising and
//! the pipeline stages. Arrays cross the boundary as nested lists.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use oatk::config::PipelineConfig;
use oatk::metrics::{ChannelMask, RoiLabel, RoiMask};
use oatk::{ArrayGeometry, Error, ForwardOperator, GridSpec, ImageGrid, Sinogram};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Config(_) | Error::Shape(_) | Error::Data(_) | Error::NonFinite { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn array<T: Copy>(rows: Vec<Vec<T>>, what: &str) -> PyResult<Array2<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().position(|r| r.len() != w) {
        return Err(PyValueError::new_err(format!("{what}: row {r} has {} entries, expected {w}", rows[r].len())));
    }
    let flat: Vec<T> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((h, w), flat).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn sinogram(data: Vec<Vec<f64>>, sample_rate_hz: f64) -> PyResult<Sinogram> {
    Sinogram::new(array(data, "sinogram")?, sample_rate_hz).map_err(to_py)
}

fn config(path: Option<PathBuf>, overrides: &[String]) -> PyResult<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load_with(p, overrides),
        None => PipelineConfig::from_toml_with("", overrides),
    }
    .map_err(to_py)
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// The default pipeline configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    PipelineConfig::default().to_toml().map_err(to_py)
}

/// `(data, sample_rate_hz, wavelength_nm)` from an OASG file.
#[pyfunction]
fn read_sinogram(path: PathBuf) -> PyResult<(Vec<Vec<f64>>, f64, Option<f64>)> {
    let s = oatk::io::read_sinogram(path).map_err(to_py)?;
    Ok((rows(s.data()), s.sample_rate_hz(), s.wavelength_nm()))
}

#[pyfunction]
#[pyo3(signature = (path, data, sample_rate_hz = 40e6, wavelength_nm = None))]
fn write_sinogram(path: PathBuf, data: Vec<Vec<f64>>, sample_rate_hz: f64, wavelength_nm: Option<f64>) -> PyResult<()> {
    let s = sinogram(data, sample_rate_hz)?.with_wavelength(wavelength_nm);
    oatk::io::write_sinogram(&s, path).map_err(to_py)
}

/// SNR in dB of `signal` after removing the estimate `noise_hat` of the
/// known noise `noise`.
#[pyfunction]
#[pyo3(signature = (signal, noise, noise_hat, excluded_channels = vec![]))]
fn snr_db(
    signal: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
    noise_hat: Vec<Vec<f64>>,
    excluded_channels: Vec<usize>,
) -> PyResult<f64> {
    let s = sinogram(signal, 40e6)?;
    let mask = ChannelMask::excluding(s.n_transducers(), &excluded_channels).map_err(to_py)?;
    oatk::metrics::snr(&s, &sinogram(noise, 40e6)?, &sinogram(noise_hat, 40e6)?, &mask).map_err(to_py)
}

/// Contrast resolution of `image` between two boolean masks; `None` when
/// undefined.
#[pyfunction]
fn contrast_resolution(image: Vec<Vec<f64>>, vessels: Vec<Vec<bool>>, background: Vec<Vec<bool>>) -> PyResult<Option<f64>> {
    let img = ImageGrid::new(array(image, "image")?, 1.0).map_err(to_py)?;
    let v = RoiMask::new(array(vessels, "vessels")?, RoiLabel::Vessel).map_err(to_py)?;
    let b = RoiMask::new(array(background, "background")?, RoiLabel::Background).map_err(to_py)?;
    oatk::metrics::contrast_resolution(&img, &v, &b).map_err(to_py)
}

/// Sinogram of a square image centred in the desk array.
#[pyfunction]
#[pyo3(signature = (image, extent_m = 5e-3, n_transducers = 64, n_samples = 256, t_offset_samples = 1466))]
fn forward(
    py: Python<'_>,
    image: Vec<Vec<f64>>,
    extent_m: f64,
    n_transducers: usize,
    n_samples: usize,
    t_offset_samples: i64,
) -> PyResult<Vec<Vec<f64>>> {
    let img = ImageGrid::new(array(image, "image")?, extent_m).map_err(to_py)?;
    if img.n_x() != img.n_y() {
        return Err(PyValueError::new_err("image must be square"));
    }
    let geometry = ArrayGeometry {
        n_transducers,
        ..ArrayGeometry::desk_64()
    };
    let grid = GridSpec::square(img.n_x(), extent_m);
    py.detach(|| {
        let op = ForwardOperator::new(geometry, grid, n_samples, t_offset_samples)?;
        op.apply_forward(&img)
    })
    .map(|s| rows(s.data()))
    .map_err(to_py)
}

/// Removes the noise a trained model predicts in `data`.
#[pyfunction]
#[pyo3(signature = (model_path, data, sample_rate_hz = 40e6))]
fn denoise(py: Python<'_>, model_path: PathBuf, data: Vec<Vec<f64>>, sample_rate_hz: f64) -> PyResult<Vec<Vec<f64>>> {
    let s = sinogram(data, sample_rate_hz)?;
    py.detach(|| {
        let m = oatk::denoiser::load_model(&model_path)?;
        oatk::denoiser::denoise(&m, &s)
    })
    .map(|d| rows(d.data()))
    .map_err(to_py)
}

/// Runs one pipeline stage. `inputs` are the stage's upstream paths in
/// command-line order: `make_dataset` takes an optional image directory,
/// `train` a dataset, `denoise` a model and an input, `reconstruct` and
/// `unmix` an input, `metrics` a phantom dataset and a reconstruction,
/// `report` a results directory, `bench` an optional model.
#[pyfunction]
#[pyo3(signature = (stage, out, inputs = vec![], config_path = None, overrides = vec![]))]
fn run_stage(
    py: Python<'_>,
    stage: &str,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    config_path: Option<PathBuf>,
    overrides: Vec<String>,
) -> PyResult<()> {
    use oatk::pipeline::*;
    let arity = |n: usize| -> PyResult<()> {
        if inputs.len() != n {
            return Err(PyValueError::new_err(format!("{stage} takes {n} input paths, got {}", inputs.len())));
        }
        Ok(())
    };
    if stage == "report" {
        arity(1)?;
        return py.detach(|| cmd_report(&inputs[0], &out).map(|_| ())).map_err(to_py);
    }
    let cfg = config(config_path, &overrides)?;
    match stage {
        "make_dataset" => {
            if inputs.len() > 1 {
                arity(1)?;
            }
            py.detach(|| cmd_make_dataset(&cfg, inputs.first().map(PathBuf::as_path), &out).map(|_| ()))
        }
        "train" => {
            arity(1)?;
            py.detach(|| cmd_train(&cfg, &inputs[0], &out).map(|_| ()))
        }
        "denoise" => {
            arity(2)?;
            py.detach(|| cmd_denoise(&cfg, &inputs[0], &inputs[1], &out).map(|_| ()))
        }
        "reconstruct" => {
            arity(1)?;
            py.detach(|| cmd_reconstruct(&cfg, &inputs[0], &out).map(|_| ()))
        }
        "unmix" => {
            arity(1)?;
            py.detach(|| cmd_unmix(&cfg, &inputs[0], &out).map(|_| ()))
        }
        "metrics" => {
            arity(2)?;
            py.detach(|| cmd_metrics(&cfg, &inputs[0], &inputs[1], &out).map(|_| ()))
        }
        "bench" => {
            if inputs.len() > 1 {
                arity(1)?;
            }
            py.detach(|| cmd_bench(&cfg, inputs.first().map(PathBuf::as_path), &out).map(|_| ()))
        }
        other => return Err(PyValueError::new_err(format!("unknown stage {other:?}"))),
    }
    .map_err(to_py)
}

#[pymodule]
fn oatk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(read_sinogram, m)?)?;
    m.add_function(wrap_pyfunction!(write_sinogram, m)?)?;
    m.add_function(wrap_pyfunction!(snr_db, m)?)?;
    m.add_function(wrap_pyfunction!(contrast_resolution, m)?)?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add_function(wrap_pyfunction!(denoise, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(array(vec![vec![1.0, 2.0], vec![3.0]], "x").is_err());
        let a = array(vec![vec![1.0, 2.0], vec![3.0, 4.0]], "x").unwrap();
        assert_eq!(rows(&a), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }
}
