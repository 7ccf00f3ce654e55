//! Domain types shared by every stage of the pipeline.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time-resolved pressure samples, indexed `[transducer, time]`.
///
/// Samples are held in `f64`; the on-disk format stores `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    data: Array2<f64>,
    sample_rate_hz: f64,
    wavelength_nm: Option<f64>,
}

impl Sinogram {
    pub fn new(data: Array2<f64>, sample_rate_hz: f64) -> Result<Self> {
        let (d, t) = data.dim();
        if d == 0 || t == 0 {
            return Err(Error::Shape(format!("sinogram must be non-empty, got {d}x{t}")));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::Data(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "sinogram".into(),
                index,
            });
        }
        Ok(Sinogram {
            data,
            sample_rate_hz,
            wavelength_nm: None,
        })
    }

    pub fn zeros(n_transducers: usize, n_samples: usize, sample_rate_hz: f64) -> Self {
        Sinogram::new(Array2::zeros((n_transducers, n_samples)), sample_rate_hz)
            .expect("zero sinogram with positive shape")
    }

    pub fn with_wavelength(mut self, wavelength_nm: Option<f64>) -> Self {
        self.wavelength_nm = wavelength_nm;
        self
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn n_transducers(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn wavelength_nm(&self) -> Option<f64> {
        self.wavelength_nm
    }

    pub fn channel(&self, d: usize) -> ArrayView1<'_, f64> {
        self.data.row(d)
    }

    /// New sinogram with the same metadata and different samples.
    pub fn with_data(&self, data: Array2<f64>) -> Result<Self> {
        Ok(Sinogram::new(data, self.sample_rate_hz)?.with_wavelength(self.wavelength_nm))
    }

    /// Rounds every sample to the nearest `f32`, the storage precision.
    pub fn quantized(&self) -> Self {
        Sinogram {
            data: self.data.mapv(|v| v as f32 as f64),
            ..self.clone()
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Sinogram, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Transducers placed equidistantly on a circular arc.
///
/// Element `d` of `n` sits at angle
/// `-π/2 + coverage * ((d + 0.5) / n - 0.5)` around `center`, in image
/// coordinates where `x` grows with the column index and `y` with the row
/// index. The arc is therefore centred above the top row of the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayGeometry {
    pub n_transducers: usize,
    pub radius_m: f64,
    pub coverage_deg: f64,
    pub sample_rate_hz: f64,
    pub speed_of_sound_m_s: f64,
    pub center: [f64; 2],
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self::desk_64()
    }
}

impl ArrayGeometry {
    /// 256 elements, 6 cm radius, 145° coverage, 40 MHz sampling.
    pub fn handheld_256() -> Self {
        ArrayGeometry {
            n_transducers: 256,
            radius_m: 0.06,
            coverage_deg: 145.0,
            sample_rate_hz: 40e6,
            speed_of_sound_m_s: 1500.0,
            center: [0.0, 0.0],
        }
    }

    /// Same arc sampled with 64 elements.
    pub fn desk_64() -> Self {
        ArrayGeometry {
            n_transducers: 64,
            ..Self::handheld_256()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("array geometry: {what}")));
        if self.n_transducers == 0 {
            return bad("n_transducers must be at least 1");
        }
        if !(self.radius_m > 0.0 && self.radius_m.is_finite()) {
            return bad("radius must be positive");
        }
        if !(self.coverage_deg > 0.0 && self.coverage_deg <= 360.0) {
            return bad("coverage must lie in (0, 360] degrees");
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return bad("sample rate must be positive");
        }
        if !(self.speed_of_sound_m_s > 0.0 && self.speed_of_sound_m_s.is_finite()) {
            return bad("speed of sound must be positive");
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return bad("center must be finite");
        }
        Ok(())
    }

    /// Angular pitch between neighbouring elements, in radians.
    pub fn pitch_rad(&self) -> f64 {
        self.coverage_deg.to_radians() / self.n_transducers as f64
    }

    pub fn transducer_angle(&self, d: usize) -> f64 {
        let n = self.n_transducers as f64;
        -std::f64::consts::FRAC_PI_2 + self.coverage_deg.to_radians() * ((d as f64 + 0.5) / n - 0.5)
    }

    pub fn transducer_position(&self, d: usize) -> [f64; 2] {
        let phi = self.transducer_angle(d);
        [
            self.center[0] + self.radius_m * phi.cos(),
            self.center[1] + self.radius_m * phi.sin(),
        ]
    }

    pub fn transducer_positions(&self) -> Vec<[f64; 2]> {
        (0..self.n_transducers).map(|d| self.transducer_position(d)).collect()
    }

    /// Distance travelled by sound between two consecutive samples.
    pub fn sample_spacing_m(&self) -> f64 {
        self.speed_of_sound_m_s / self.sample_rate_hz
    }
}

/// Pixel lattice of an image without its values.
///
/// Pixels are square with side `extent_m / n_x`; pixel `(row, col)` is
/// centred at `center + ((col + 0.5) h - W/2, (row + 0.5) h - H/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub n_x: usize,
    pub n_y: usize,
    pub extent_m: f64,
    pub center: [f64; 2],
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::square(128, 5e-3)
    }
}

impl GridSpec {
    pub fn square(n: usize, extent_m: f64) -> Self {
        GridSpec {
            n_x: n,
            n_y: n,
            extent_m,
            center: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 {
            return Err(Error::Config("grid must have at least one pixel".into()));
        }
        if !(self.extent_m > 0.0 && self.extent_m.is_finite()) {
            return Err(Error::Config("grid extent must be positive".into()));
        }
        Ok(())
    }

    pub fn pixel_size(&self) -> f64 {
        self.extent_m / self.n_x as f64
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_y, self.n_x)
    }

    pub fn len(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical position of the pixel centre `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let h = self.pixel_size();
        [
            self.center[0] + (col as f64 + 0.5) * h - 0.5 * self.n_x as f64 * h,
            self.center[1] + (row as f64 + 0.5) * h - 0.5 * self.n_y as f64 * h,
        ]
    }

    /// Continuous `(row, col)` coordinates of a physical point.
    pub fn to_index_coords(&self, point: [f64; 2]) -> (f64, f64) {
        let h = self.pixel_size();
        let col = (point[0] - self.center[0] + 0.5 * self.n_x as f64 * h) / h - 0.5;
        let row = (point[1] - self.center[1] + 0.5 * self.n_y as f64 * h) / h - 0.5;
        (row, col)
    }

    /// Radius of the disc around `center` that contains every pixel.
    pub fn half_diagonal(&self) -> f64 {
        let h = self.pixel_size();
        0.5 * h * ((self.n_x * self.n_x + self.n_y * self.n_y) as f64).sqrt()
    }
}

/// Image values on a pixel lattice, indexed `[row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pixels: Array2<f64>,
    extent_m: f64,
}

impl ImageGrid {
    pub fn new(pixels: Array2<f64>, extent_m: f64) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Shape("image must be non-empty".into()));
        }
        if !(extent_m > 0.0 && extent_m.is_finite()) {
            return Err(Error::Data(format!("image extent must be positive, got {extent_m}")));
        }
        if let Some(index) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "image".into(),
                index,
            });
        }
        Ok(ImageGrid { pixels, extent_m })
    }

    pub fn zeros(spec: &GridSpec) -> Self {
        ImageGrid {
            pixels: Array2::zeros(spec.shape()),
            extent_m: spec.extent_m,
        }
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn n_x(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn extent_m(&self) -> f64 {
        self.extent_m
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            n_x: self.n_x(),
            n_y: self.n_y(),
            extent_m: self.extent_m,
            center: [0.0, 0.0],
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.pixels.iter().all(|&v| v >= 0.0)
    }
}

/// Anything with a two-dimensional sample layout.
pub trait Dims {
    fn dims(&self) -> (usize, usize);
}

impl Dims for Sinogram {
    fn dims(&self) -> (usize, usize) {
        self.shape()
    }
}

impl Dims for ImageGrid {
    fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Wavelength-ordered sinograms or images of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct MultispectralStack<T> {
    entries: Vec<(f64, T)>,
}

impl<T: Dims> MultispectralStack<T> {
    pub fn new(entries: Vec<(f64, T)>) -> Result<Self> {
        if let Some(w) = entries.windows(2).find(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::Data(format!(
                "wavelengths must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
        if let Some((first, rest)) = entries.split_first() {
            let dims = first.1.dims();
            if let Some((wl, _)) = rest.iter().find(|(_, e)| e.dims() != dims) {
                return Err(Error::Shape(format!("stack entry at {wl} nm differs from {dims:?}")));
            }
        }
        Ok(MultispectralStack { entries })
    }

    pub fn entries(&self) -> &[(f64, T)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(f64, T)> {
        self.entries
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        self.entries.iter().map(|(w, _)| *w).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `start, start + step, …` up to and including `end`.
pub fn wavelength_grid(start_nm: f64, end_nm: f64, step_nm: f64) -> Vec<f64> {
    let n = ((end_nm - start_nm) / step_nm).round() as usize + 1;
    (0..n).map(|i| start_nm + step_nm * i as f64).collect()
}
