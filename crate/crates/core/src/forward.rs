//! Acoustic forward model of a circular transducer array and its adjoint.
//!
//! For transducer `d` and sample `t` the model integrates the initial
//! pressure over the circle of radius `ρ = c (t + t_offset) / f_s` centred
//! on the transducer, divides by the circumference (circular mean) and
//! takes a centred first difference in `t`:
//!
//! `s[d, t] = (m[d, t + 1] - m[d, t - 1]) / 2`.
//!
//! The circle is sampled only where it can meet the image: points are
//! spaced at most half a pixel apart along the arc and the image is read by
//! bilinear interpolation between pixel centres, with zero outside the
//! lattice. Forward and adjoint walk the same point sequence, so the pair
//! is an exact transpose.

use std::f64::consts::TAU;
use std::path::PathBuf;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::operator::LinearOperator;
use crate::rng::{seeded_rng, RngSeed};
use crate::types::{ArrayGeometry, GridSpec, ImageGrid, Sinogram};

/// Transducers accumulated into one partial image during the adjoint.
const ADJOINT_CHUNK: usize = 8;

/// Dense materialisation is limited to this many pixels.
pub const MAX_DENSE_PIXELS: usize = 32 * 32;

#[derive(Debug, Clone, Copy)]
struct ArcPlan {
    /// first point angle (radians)
    start: f64,
    step: f64,
    count: u32,
    /// quadrature weight per point, `step / 2π`
    weight: f64,
    radius_px: f64,
}

/// Matrix-free forward operator for one array geometry and image grid.
#[derive(Debug, Clone)]
pub struct ForwardOperator {
    geometry: ArrayGeometry,
    grid: GridSpec,
    n_samples: usize,
    t_offset_samples: i64,
    /// transducer positions in continuous `(row, col)` pixel coordinates
    origins: Vec<(f64, f64)>,
    /// `n_transducers × (n_samples + 2)` plans; entry `i` is time `i - 1`
    arcs: Vec<ArcPlan>,
}

impl ForwardOperator {
    pub fn new(geometry: ArrayGeometry, grid: GridSpec, n_samples: usize, t_offset_samples: i64) -> Result<Self> {
        geometry.validate()?;
        grid.validate()?;
        if n_samples == 0 {
            return Err(Error::Config("forward operator needs at least one sample".into()));
        }
        let h = grid.pixel_size();
        let reach = grid.half_diagonal() + h;
        let dr = geometry.sample_spacing_m();
        let n_ext = n_samples + 2;
        let mut origins = Vec::with_capacity(geometry.n_transducers);
        let mut arcs = Vec::with_capacity(geometry.n_transducers * n_ext);
        for d in 0..geometry.n_transducers {
            let pos = geometry.transducer_position(d);
            origins.push(grid.to_index_coords(pos));
            let (vx, vy) = (grid.center[0] - pos[0], grid.center[1] - pos[1]);
            let dist = vx.hypot(vy);
            let toward = vy.atan2(vx);
            for i in 0..n_ext {
                let t = i as i64 - 1 + t_offset_samples;
                let rho = dr * t as f64;
                arcs.push(plan_arc(rho, dist, toward, reach, h));
            }
        }
        Ok(ForwardOperator {
            geometry,
            grid,
            n_samples,
            t_offset_samples,
            origins,
            arcs,
        })
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn t_offset_samples(&self) -> i64 {
        self.t_offset_samples
    }

    pub fn sinogram_shape(&self) -> (usize, usize) {
        (self.geometry.n_transducers, self.n_samples)
    }

    /// Forward model on an image of the operator's grid.
    pub fn apply_forward(&self, p0: &ImageGrid) -> Result<Sinogram> {
        if p0.pixels().dim() != self.grid.shape() {
            return Err(Error::Shape(format!(
                "image is {:?}, operator grid is {:?}",
                p0.pixels().dim(),
                self.grid.shape()
            )));
        }
        Sinogram::new(self.forward_array(p0.pixels()), self.geometry.sample_rate_hz)
    }

    /// Transpose of [`apply_forward`](Self::apply_forward).
    pub fn apply_adjoint(&self, s: &Sinogram) -> Result<ImageGrid> {
        if s.shape() != self.sinogram_shape() {
            return Err(Error::Shape(format!(
                "sinogram is {:?}, operator expects {:?}",
                s.shape(),
                self.sinogram_shape()
            )));
        }
        ImageGrid::new(self.adjoint_array(s.data()), self.grid.extent_m)
    }

    fn arc(&self, d: usize, i: usize) -> &ArcPlan {
        &self.arcs[d * (self.n_samples + 2) + i]
    }

    fn circular_means(&self, d: usize, img: &[f64], out: &mut [f64]) {
        let (r0, c0) = self.origins[d];
        let (ny, nx) = self.grid.shape();
        for (i, m) in out.iter_mut().enumerate() {
            let arc = self.arc(d, i);
            if arc.count == 0 {
                *m = 0.0;
                continue;
            }
            let mut acc = 0.0;
            walk_arc(arc, r0, c0, |row, col| {
                acc += bilinear_read(img, ny, nx, row, col);
            });
            *m = acc * arc.weight;
        }
    }

    fn forward_row(&self, d: usize, img: &[f64], row: &mut [f64]) {
        let mut m = vec![0.0; self.n_samples + 2];
        self.circular_means(d, img, &mut m);
        for (t, s) in row.iter_mut().enumerate() {
            *s = 0.5 * (m[t + 2] - m[t]);
        }
    }

    fn adjoint_accumulate(&self, d: usize, row: &[f64], img: &mut [f64], ny: usize, nx: usize) {
        let n = self.n_samples;
        let mut mbar = vec![0.0; n + 2];
        for (t, &s) in row.iter().enumerate() {
            mbar[t + 2] += 0.5 * s;
            mbar[t] -= 0.5 * s;
        }
        let (r0, c0) = self.origins[d];
        for (i, &g) in mbar.iter().enumerate() {
            let arc = self.arc(d, i);
            if arc.count == 0 || g == 0.0 {
                continue;
            }
            let w = g * arc.weight;
            walk_arc(arc, r0, c0, |r, c| bilinear_scatter(img, ny, nx, r, c, w));
        }
    }

    /// Forward model on a raw `[row, col]` array.
    pub fn forward_array(&self, p: &Array2<f64>) -> Array2<f64> {
        assert_eq!(p.dim(), self.grid.shape(), "image does not match operator grid");
        let p = p.as_standard_layout();
        let img = p.as_slice().expect("standard layout");
        let (n_d, n_t) = self.sinogram_shape();
        let rows: Vec<Vec<f64>> = (0..n_d)
            .into_par_iter()
            .map(|d| {
                let mut row = vec![0.0; n_t];
                self.forward_row(d, img, &mut row);
                row
            })
            .collect();
        Array2::from_shape_vec((n_d, n_t), rows.concat()).unwrap()
    }

    /// Adjoint on a raw `[transducer, time]` array.
    ///
    /// Transducers are summed in fixed chunks of eight and the chunk images
    /// are added in transducer order, so the result does not depend on the
    /// number of worker threads.
    pub fn adjoint_array(&self, s: &Array2<f64>) -> Array2<f64> {
        let s = s.as_standard_layout();
        let (ny, nx) = self.grid.shape();
        let n_d = self.geometry.n_transducers;
        let chunks: Vec<Vec<f64>> = (0..n_d.div_ceil(ADJOINT_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut img = vec![0.0; ny * nx];
                for d in c * ADJOINT_CHUNK..((c + 1) * ADJOINT_CHUNK).min(n_d) {
                    let row = s.row(d);
                    self.adjoint_accumulate(d, row.as_slice().expect("contiguous row"), &mut img, ny, nx);
                }
                img
            })
            .collect();
        let mut total = vec![0.0; ny * nx];
        for chunk in &chunks {
            for (t, v) in total.iter_mut().zip(chunk) {
                *t += v;
            }
        }
        Array2::from_shape_vec((ny, nx), total).unwrap()
    }

    /// Explicit matrix of the operator, for grids of at most 32×32 pixels.
    pub fn to_dense(&self) -> Result<crate::operator::DenseOperator> {
        if self.grid.len() > MAX_DENSE_PIXELS {
            return Err(Error::Config(format!(
                "dense materialisation is limited to {MAX_DENSE_PIXELS} pixels, grid has {}",
                self.grid.len()
            )));
        }
        Ok(crate::operator::DenseOperator::materialize(self))
    }
}

impl LinearOperator for ForwardOperator {
    fn domain_shape(&self) -> (usize, usize) {
        self.grid.shape()
    }

    fn range_shape(&self) -> (usize, usize) {
        self.sinogram_shape()
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_array(x)
    }

    fn apply_adjoint(&self, y: &Array2<f64>) -> Array2<f64> {
        self.adjoint_array(y)
    }
}

fn plan_arc(rho: f64, dist: f64, toward: f64, reach: f64, h: f64) -> ArcPlan {
    let empty = ArcPlan {
        start: 0.0,
        step: 0.0,
        count: 0,
        weight: 0.0,
        radius_px: 0.0,
    };
    if rho <= 0.0 {
        return empty;
    }
    let half_angle = if dist > reach {
        if (rho - dist).abs() >= reach {
            return empty;
        }
        ((dist * dist + rho * rho - reach * reach) / (2.0 * dist * rho))
            .clamp(-1.0, 1.0)
            .acos()
    } else {
        std::f64::consts::PI
    };
    let count = ((2.0 * half_angle * rho) / (0.5 * h)).ceil().max(1.0);
    let step = 2.0 * half_angle / count;
    ArcPlan {
        start: toward - half_angle + 0.5 * step,
        step,
        count: count as u32,
        weight: step / TAU,
        radius_px: rho / h,
    }
}

/// Visits every arc point in continuous pixel coordinates `(row, col)`.
#[inline]
fn walk_arc(arc: &ArcPlan, r0: f64, c0: f64, mut visit: impl FnMut(f64, f64)) {
    let (mut sin, mut cos) = arc.start.sin_cos();
    let (ds, dc) = arc.step.sin_cos();
    let rad = arc.radius_px;
    for _ in 0..arc.count {
        visit(r0 + rad * sin, c0 + rad * cos);
        let c = cos * dc - sin * ds;
        sin = sin * dc + cos * ds;
        cos = c;
    }
}

#[inline]
fn bilinear_taps(ny: usize, nx: usize, row: f64, col: f64) -> Option<(isize, isize, f64, f64)> {
    if !(row > -1.0 && col > -1.0 && row < ny as f64 && col < nx as f64) {
        return None;
    }
    let rf = row.floor();
    let cf = col.floor();
    Some((rf as isize, cf as isize, row - rf, col - cf))
}

#[inline]
fn bilinear_read(img: &[f64], ny: usize, nx: usize, row: f64, col: f64) -> f64 {
    let Some((r, c, fr, fc)) = bilinear_taps(ny, nx, row, col) else {
        return 0.0;
    };
    let at = |rr: isize, cc: isize| -> f64 {
        if rr >= 0 && cc >= 0 && (rr as usize) < ny && (cc as usize) < nx {
            img[rr as usize * nx + cc as usize]
        } else {
            0.0
        }
    };
    (1.0 - fr) * ((1.0 - fc) * at(r, c) + fc * at(r, c + 1)) + fr * ((1.0 - fc) * at(r + 1, c) + fc * at(r + 1, c + 1))
}

#[inline]
fn bilinear_scatter(img: &mut [f64], ny: usize, nx: usize, row: f64, col: f64, w: f64) {
    let Some((r, c, fr, fc)) = bilinear_taps(ny, nx, row, col) else {
        return;
    };
    let mut put = |rr: isize, cc: isize, v: f64| {
        if rr >= 0 && cc >= 0 && (rr as usize) < ny && (cc as usize) < nx {
            img[rr as usize * nx + cc as usize] += v;
        }
    };
    put(r, c, w * (1.0 - fr) * (1.0 - fc));
    put(r, c + 1, w * (1.0 - fr) * fc);
    put(r + 1, c, w * fr * (1.0 - fc));
    put(r + 1, c + 1, w * fr * fc);
}

/// Bilinear resampling aligned on pixel centres.
pub fn resample(src: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let (sy, sx) = src.dim();
    if (sy, sx) == shape {
        return src.clone();
    }
    let coord = |dst: usize, n_dst: usize, n_src: usize| -> (usize, usize, f64) {
        let x = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let i = (x.floor() as usize).min(n_src - 1);
        let j = (i + 1).min(n_src - 1);
        (i, j, x - i as f64)
    };
    let rows: Vec<_> = (0..shape.0).map(|r| coord(r, shape.0, sy)).collect();
    let cols: Vec<_> = (0..shape.1).map(|c| coord(c, shape.1, sx)).collect();
    Array2::from_shape_fn(shape, |(r, c)| {
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        (1.0 - fr) * ((1.0 - fc) * src[[r0, c0]] + fc * src[[r0, c1]])
            + fr * ((1.0 - fc) * src[[r1, c0]] + fc * src[[r1, c1]])
    })
}

/// Linear map of an image onto `[0, 1]`; constant images map to all ones
/// when positive and all zeros otherwise.
pub fn rescale_unit(img: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        img.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::from_elem(img.dim(), if hi > 0.0 { 1.0 } else { 0.0 })
    }
}

/// Where a feature image comes from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    /// 8- or 16-bit binary PGM file.
    Pgm(PathBuf),
    /// Already decoded grayscale values.
    Array { name: String, pixels: Array2<f64> },
}

impl ImageSource {
    pub fn name(&self) -> String {
        match self {
            ImageSource::Pgm(p) => p.display().to_string(),
            ImageSource::Array { name, .. } => name.clone(),
        }
    }

    fn decode(&self) -> Result<Array2<f64>> {
        match self {
            ImageSource::Pgm(p) => Ok(crate::io::read_pgm(p)?.to_unit_array()),
            ImageSource::Array { pixels, .. } => Ok(pixels.clone()),
        }
    }
}

/// Options for [`simulate_corpus`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CorpusOptions {
    /// Shuffle the image order with the seed.
    pub shuffle: bool,
    /// Random horizontal/vertical flips drawn from the seed.
    pub flips: bool,
}

#[derive(Debug, Clone)]
pub struct SimulatedSinogram {
    pub source: String,
    pub sinogram: Sinogram,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub items: Vec<SimulatedSinogram>,
    /// `(source, reason)` for every image that could not be decoded.
    pub skipped: Vec<(String, String)>,
}

/// Noise-free sinograms of a set of feature images used as initial
/// pressure distributions.
pub fn simulate_corpus(sources: &[ImageSource], op: &ForwardOperator, seed: RngSeed, opts: CorpusOptions) -> Corpus {
    let mut rng = seeded_rng(seed, "corpus");
    let mut order: Vec<usize> = (0..sources.len()).collect();
    if opts.shuffle {
        rng.shuffle(&mut order);
    }
    let flips: Vec<(bool, bool)> = order
        .iter()
        .map(|_| {
            if opts.flips {
                (rng.uniform() < 0.5, rng.uniform() < 0.5)
            } else {
                (false, false)
            }
        })
        .collect();
    let simulated: Vec<(String, Result<Sinogram>)> = order
        .par_iter()
        .zip(flips.par_iter())
        .map(|(&i, &(flip_x, flip_y))| {
            let src = &sources[i];
            let sim = src.decode().map(|raw| {
                let mut img = rescale_unit(&resample(&raw, op.grid().shape()));
                if flip_x {
                    img.invert_axis(Axis(1));
                }
                if flip_y {
                    img.invert_axis(Axis(0));
                }
                Sinogram::new(op.forward_array(&img), op.geometry().sample_rate_hz)
                    .expect("forward model of a finite image is finite")
            });
            (src.name(), sim)
        })
        .collect();
    let mut corpus = Corpus::default();
    for (source, sim) in simulated {
        match sim {
            Ok(sinogram) => corpus.items.push(SimulatedSinogram { source, sinogram }),
            Err(e) => {
                log::warn!("skipping {source}: {e}");
                corpus.skipped.push((source, e.to_string()));
            }
        }
    }
    corpus
}

/// Index of the largest `|s|` in every channel (first one on ties).
pub fn channel_peaks(s: &Array2<f64>) -> Array1<usize> {
    s.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (t, v) in row.iter().enumerate() {
                if v.abs() > row[best].abs() {
                    best = t;
                }
            }
            best
        })
        .collect()
}
