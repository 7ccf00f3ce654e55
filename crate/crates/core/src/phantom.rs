//! Procedural initial-pressure images: generic feature images for training
//! corpora and vessel phantoms with ground-truth masks.

use ndarray::Array2;

use crate::metrics::{RoiLabel, RoiMask};
use crate::rng::OaRng;
use crate::unmix::synthetic_reference_spectra;

fn smoothstep(edge: f64, x: f64) -> f64 {
    // 1 inside (x < -edge), 0 outside (x > edge)
    let t = ((edge - x) / (2.0 * edge)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Quadratic Bézier through random control points, as a polyline.
fn random_curve(n: usize, rng: &mut OaRng, margin: f64) -> Vec<(f64, f64)> {
    let nf = n as f64;
    let mut pt = || {
        (
            rng.uniform_range(margin * nf, (1.0 - margin) * nf),
            rng.uniform_range(margin * nf, (1.0 - margin) * nf),
        )
    };
    let (a, b, c) = (pt(), pt(), pt());
    (0..=48)
        .map(|i| {
            let t = i as f64 / 48.0;
            let u = 1.0 - t;
            (
                u * u * a.0 + 2.0 * u * t * b.0 + t * t * c.0,
                u * u * a.1 + 2.0 * u * t * b.1 + t * t * c.1,
            )
        })
        .collect()
}

fn distance_to_polyline(p: (f64, f64), line: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for w in line.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
        best = best.min((qx * qx + qy * qy).sqrt());
    }
    best
}

/// Soft-edged ellipses and curved strokes of random intensity on a zero
/// background, `n × n`.
pub fn feature_image(n: usize, rng: &mut OaRng) -> Array2<f64> {
    let nf = n as f64;
    let mut img = Array2::<f64>::zeros((n, n));
    let n_ell = rng.int_range(3, 8);
    for _ in 0..n_ell {
        let cy = rng.uniform_range(0.15 * nf, 0.85 * nf);
        let cx = rng.uniform_range(0.15 * nf, 0.85 * nf);
        let ay = rng.uniform_range(0.03 * nf, 0.2 * nf);
        let ax = rng.uniform_range(0.03 * nf, 0.2 * nf);
        let th = rng.uniform_range(0.0, std::f64::consts::PI);
        let amp = rng.uniform_range(0.2, 1.0);
        let (s, c) = th.sin_cos();
        for ((r, col), v) in img.indexed_iter_mut() {
            let (y, x) = (r as f64 + 0.5 - cy, col as f64 + 0.5 - cx);
            let (u, w) = (c * x + s * y, -s * x + c * y);
            let rho = ((u / ax).powi(2) + (w / ay).powi(2)).sqrt();
            // signed distance proxy in pixels
            let d = (rho - 1.0) * ax.min(ay);
            *v += amp * smoothstep(1.0, d);
        }
    }
    let n_lines = rng.int_range(0, 3);
    for _ in 0..n_lines {
        let line = random_curve(n, rng, 0.1);
        let width = rng.uniform_range(0.5, 2.0);
        let amp = rng.uniform_range(0.3, 1.0);
        for ((r, col), v) in img.indexed_iter_mut() {
            let d = distance_to_polyline((r as f64 + 0.5, col as f64 + 0.5), &line) - width;
            *v += amp * smoothstep(0.75, d);
        }
    }
    img
}

/// Vessel phantom with its ground-truth regions.
#[derive(Debug, Clone)]
pub struct VesselPhantom {
    /// `max(vessel_layer, tissue_layer)`.
    pub image: Array2<f64>,
    pub vessel_layer: Array2<f64>,
    pub tissue_layer: Array2<f64>,
    pub vessels: RoiMask,
    pub background: RoiMask,
}

/// Weakly absorbing tissue disk crossed by 3–5 curved vessels. The vessel
/// mask holds vessel cores; the background mask holds tissue at least
/// three pixels away from every vessel, scaled down on grids under 64
/// pixels. Layouts that leave either mask empty are redrawn.
pub fn vessel_phantom(n: usize, rng: &mut OaRng) -> VesselPhantom {
    assert!(n >= 16, "vessel phantoms need at least 16x16 pixels");
    loop {
        if let Some(p) = draw_vessel_phantom(n, rng) {
            return p;
        }
    }
}

fn draw_vessel_phantom(n: usize, rng: &mut OaRng) -> Option<VesselPhantom> {
    let nf = n as f64;
    let margin = (3.0 * nf / 64.0).clamp(1.0, 3.0);
    let centre = nf / 2.0;
    let tissue_r = 0.42 * nf;
    let mut tissue = Array2::<f64>::zeros((n, n));
    let mut vessel = Array2::<f64>::zeros((n, n));
    let mut dist = Array2::<f64>::from_elem((n, n), f64::INFINITY);
    let mut core = Array2::from_elem((n, n), false);
    for ((r, c), v) in tissue.indexed_iter_mut() {
        let d = ((r as f64 + 0.5 - centre).powi(2) + (c as f64 + 0.5 - centre).powi(2)).sqrt();
        *v = 0.1 * smoothstep(1.0, d - tissue_r);
    }
    let n_vessels = rng.int_range(3, 5);
    for _ in 0..n_vessels {
        let line = random_curve(n, rng, 0.2);
        let radius = rng.uniform_range(0.02 * nf, 0.04 * nf).max(1.0);
        let amp = rng.uniform_range(0.6, 1.0);
        for ((r, c), v) in vessel.indexed_iter_mut() {
            let d = distance_to_polyline((r as f64 + 0.5, c as f64 + 0.5), &line);
            *v = v.max(amp * smoothstep(0.75, d - radius));
            let gap = d - radius;
            if gap < dist[[r, c]] {
                dist[[r, c]] = gap;
            }
            if d <= (radius - 0.5).max(0.7) {
                core[[r, c]] = true;
            }
        }
    }
    let bg = Array2::from_shape_fn((n, n), |(r, c)| {
        let d = ((r as f64 + 0.5 - centre).powi(2) + (c as f64 + 0.5 - centre).powi(2)).sqrt();
        d < tissue_r - 2.0 && dist[[r, c]] > margin
    });
    let mut image = tissue.clone();
    image.zip_mut_with(&vessel, |a, &b| *a = a.max(b));
    Some(VesselPhantom {
        image,
        vessel_layer: vessel,
        tissue_layer: tissue,
        vessels: RoiMask::new(core, RoiLabel::Vessel).ok()?,
        background: RoiMask::new(bg, RoiLabel::Background).ok()?,
    })
}

/// Absorption spectra of the vessel and tissue layers, each scaled to a
/// peak of one over `wavelengths`.
pub fn phantom_spectra(wavelengths: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let refs = synthetic_reference_spectra(wavelengths);
    let mix = |a: usize, wa: f64, b: usize, wb: f64| {
        let v: Vec<f64> = (0..wavelengths.len())
            .map(|i| wa * refs[a].values[i] + wb * refs[b].values[i])
            .collect();
        let peak = v.iter().copied().fold(0.0f64, f64::max);
        v.into_iter().map(|x| x / peak).collect::<Vec<_>>()
    };
    // oxy/deoxy blood in vessels, deoxy/lipid mixture in tissue
    (mix(0, 0.75, 1, 0.25), mix(1, 0.5, 2, 0.5))
}

/// Initial pressure of `p` at every wavelength: layers weighted by their
/// spectra and attenuated by `exp(-depth / δ(λ))`, with depth measured
/// from the top row and `δ(λ) = fluence_depth_m · λ / 800 nm`.
pub fn multispectral_images(
    p: &VesselPhantom,
    wavelengths: &[f64],
    pixel_m: f64,
    fluence_depth_m: f64,
) -> Vec<Array2<f64>> {
    let (blood, tissue) = phantom_spectra(wavelengths);
    wavelengths
        .iter()
        .enumerate()
        .map(|(i, &wl)| {
            let delta = fluence_depth_m * wl / 800.0;
            Array2::from_shape_fn(p.image.dim(), |(r, c)| {
                let fluence = (-(r as f64 + 0.5) * pixel_m / delta).exp();
                fluence * (blood[i] * p.vessel_layer[[r, c]] + tissue[i] * p.tissue_layer[[r, c]])
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_rng, RngSeed};

    #[test]
    fn feature_images_are_deterministic_and_nonnegative() {
        let a = feature_image(64, &mut seeded_rng(RngSeed(1), "f"));
        let b = feature_image(64, &mut seeded_rng(RngSeed(1), "f"));
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v >= 0.0));
        assert!(a.iter().any(|&v| v > 0.1));
    }

    #[test]
    fn vessel_masks_are_disjoint_and_meaningful() {
        for seed in 0..10 {
            let p = vessel_phantom(64, &mut seeded_rng(RngSeed(seed), "v"));
            assert!(p.vessels.count() > 10);
            assert!(p.background.count() > 100);
            for ((&v, &b), &x) in p.vessels.mask.iter().zip(p.background.mask.iter()).zip(p.image.iter()) {
                assert!(!(v && b));
                if v {
                    assert!(x >= 0.5);
                }
                if b {
                    assert!(x <= 0.1 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn small_grids_still_get_both_regions() {
        for n in [16, 20, 24] {
            for seed in 0..20 {
                let p = vessel_phantom(n, &mut seeded_rng(RngSeed(seed), "small"));
                assert!(p.vessels.count() > 0 && p.background.count() > 0);
            }
        }
    }

    #[test]
    fn multispectral_layers_follow_spectra_and_fluence() {
        let p = vessel_phantom(32, &mut seeded_rng(RngSeed(3), "v"));
        let wl = [700.0, 800.0, 900.0];
        let imgs = multispectral_images(&p, &wl, 1e-4, 2e-3);
        let (blood, tissue) = phantom_spectra(&wl);
        assert_eq!(imgs.len(), 3);
        for (i, img) in imgs.iter().enumerate() {
            let delta = 2e-3 * wl[i] / 800.0;
            for ((r, c), &v) in img.indexed_iter() {
                let want = (-(r as f64 + 0.5) * 1e-4 / delta).exp()
                    * (blood[i] * p.vessel_layer[[r, c]] + tissue[i] * p.tissue_layer[[r, c]]);
                assert!((v - want).abs() < 1e-15);
            }
        }
        assert!(blood.iter().chain(&tissue).all(|&v| v > 0.0 && v <= 1.0));
    }
}
