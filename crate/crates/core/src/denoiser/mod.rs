//! Residual U-Net that estimates the electrical-noise component of a
//! sinogram. Denoising subtracts that estimate from the input.

mod model_io;
pub mod tensor;
mod train;
pub mod unet;

use ndarray::Array2;

pub use model_io::{decode_model, encode_model, load_model, save_model};
pub use train::{
    lr_factor, train, train_with_validation, write_train_log, Adam, EpochLog, NoiseSource, TrainConfig, TrainOutcome,
    Trainer,
};
pub use unet::{DenoiserArch, Layout, TensorSpec, Unet};

use crate::error::{Error, Result};
use crate::rng::OaRng;
use crate::types::Sinogram;
use tensor::{Fmap, Scalar};

/// Provenance of a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub config_hash: [u8; 32],
    pub epoch: u32,
    pub val_loss: f64,
}

impl Default for Fingerprint {
    fn default() -> Self {
        Fingerprint {
            config_hash: [0; 32],
            epoch: 0,
            val_loss: f64::NAN,
        }
    }
}

/// Architecture, weights and normalisation running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub arch: DenoiserArch,
    pub input_scale: f64,
    pub weights: Vec<f32>,
    pub buffers: Vec<f32>,
    pub fingerprint: Fingerprint,
}

impl DenoiserModel {
    /// Freshly initialised model; the output head starts at zero so the
    /// initial noise estimate is identically zero.
    pub fn init(arch: DenoiserArch, input_scale: f64, rng: &mut OaRng) -> Result<Self> {
        let net = Unet::new(arch)?;
        let (weights, buffers) = net.init::<f32>(rng);
        Ok(DenoiserModel {
            arch,
            input_scale,
            weights,
            buffers,
            fingerprint: Fingerprint::default(),
        })
    }

    pub fn unet(&self) -> Result<Unet> {
        Unet::new(self.arch)
    }

    pub fn n_weights(&self) -> usize {
        self.weights.len()
    }

    /// Checks weight counts against the architecture and finiteness.
    pub fn validate(&self) -> Result<()> {
        let net = self.unet()?;
        if self.weights.len() != net.params.len || self.buffers.len() != net.buffers.len {
            return Err(Error::Data(format!(
                "weight count mismatch: architecture {:?} needs {} weights and {} buffers, model has {} and {}",
                self.arch,
                net.params.len,
                net.buffers.len,
                self.weights.len(),
                self.buffers.len()
            )));
        }
        if let Some(i) = self.weights.iter().chain(&self.buffers).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "model weights".into(),
                index: i,
            });
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::Data(format!("input scale must be positive, got {}", self.input_scale)));
        }
        Ok(())
    }

    /// Parameter tensor by name.
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let net = self.unet().ok()?;
        let t = net.params.get(name)?;
        Some(&self.weights[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let net = self.unet().ok()?;
        let t = net.params.get(name)?.clone();
        Some(&mut self.weights[t.range()])
    }

    pub fn zero_head(&mut self) {
        for name in ["head.weight", "head.bias"] {
            if let Some(w) = self.tensor_mut(name) {
                w.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

pub(crate) fn to_fmap<T: Scalar>(data: &Array2<f64>, scale: f64) -> Fmap<T> {
    let (h, w) = data.dim();
    Fmap::from_vec(1, h, w, data.iter().map(|&v| T::of(v * scale)).collect())
}

pub(crate) fn from_fmap<T: Scalar>(f: &Fmap<T>, scale: f64) -> Array2<f64> {
    Array2::from_shape_vec((f.h, f.w), f.data.iter().map(|&v| v.f64() / scale).collect()).expect("fmap shape")
}

/// Estimated electrical noise of `s`, same shape and units.
pub fn infer_noise(m: &DenoiserModel, s: &Sinogram) -> Result<Sinogram> {
    m.validate()?;
    let (rows, cols) = s.shape();
    m.arch.check_input(rows, cols)?;
    let net = m.unet()?;
    let x = to_fmap::<f32>(s.data(), m.input_scale);
    let y = net.forward_eval(&m.weights, &m.buffers, &x);
    let out = from_fmap(&y, m.input_scale);
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("noise estimate is non-finite at flat index {i}")));
    }
    s.with_data(out)
}

/// `s − infer_noise(m, s)`.
pub fn denoise(m: &DenoiserModel, s: &Sinogram) -> Result<Sinogram> {
    let noise = infer_noise(m, s)?;
    s.with_data(s.data() - noise.data())
}

/// Mean absolute error and its gradient with respect to `pred`, both
/// multiplied by `loss_scale`. The subgradient at an exact tie is zero.
pub fn l1_loss<T: Scalar>(pred: &Fmap<T>, target: &[T], loss_scale: f64) -> (f64, Fmap<T>) {
    assert_eq!(pred.data.len(), target.len());
    let n = target.len() as f64;
    let g = T::of(loss_scale / n);
    let mut grad = Fmap::zeros(pred.c, pred.h, pred.w);
    let mut acc = 0.0;
    for ((d, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(target) {
        let r = p - t;
        acc += r.abs().f64();
        *d = if r > T::zero() {
            g
        } else if r < T::zero() {
            -g
        } else {
            T::zero()
        };
    }
    (loss_scale * acc / n, grad)
}

/// Training-mode loss and parameter gradient in double precision.
pub fn loss_gradient(m: &DenoiserModel, s: &Sinogram, target: &Sinogram, loss_scale: f64) -> Result<(f64, Vec<f64>)> {
    let (net, params, x, t) = f64_setup(m, s, target)?;
    Ok(loss_and_grad(&net, &params, &x, &t, loss_scale))
}

fn f64_setup(m: &DenoiserModel, s: &Sinogram, target: &Sinogram) -> Result<(Unet, Vec<f64>, Fmap<f64>, Vec<f64>)> {
    m.validate()?;
    s.check_same_shape(target, "gradient target")?;
    let (rows, cols) = s.shape();
    m.arch.check_input(rows, cols)?;
    let net = m.unet()?;
    let params = m.weights.iter().map(|&v| v as f64).collect();
    let x = to_fmap::<f64>(s.data(), m.input_scale);
    let t = target.data().iter().map(|&v| v * m.input_scale).collect();
    Ok((net, params, x, t))
}

fn loss_and_grad(net: &Unet, params: &[f64], x: &Fmap<f64>, target: &[f64], loss_scale: f64) -> (f64, Vec<f64>) {
    let (pred, tape) = net.forward_train(params, None, x);
    let (loss, d) = l1_loss(&pred, target, loss_scale);
    let mut g = vec![0.0; params.len()];
    net.backward(params, &tape, &d, &mut g);
    (loss, g)
}

fn loss_only(net: &Unet, params: &[f64], x: &Fmap<f64>, target: &[f64]) -> f64 {
    let (pred, _) = net.forward_train(params, None, x);
    l1_loss(&pred, target, 1.0).0
}

/// Largest relative deviation between analytic gradients and central
/// finite differences (step 1e-6) over every parameter. Each component is
/// compared on the scale `max(|analytic|, |numeric|, 1e-3·max|analytic|)`.
pub fn gradient_check(m: &DenoiserModel, s: &Sinogram, target: &Sinogram) -> Result<f64> {
    const STEP: f64 = 1e-6;
    const FLOOR: f64 = 1e-3;
    let (net, mut params, x, t) = f64_setup(m, s, target)?;
    if params.len() > 10_000 {
        return Err(Error::Config(format!(
            "gradient check is limited to 10000 parameters, model has {}",
            params.len()
        )));
    }
    let (_, analytic) = loss_and_grad(&net, &params, &x, &t, 1.0);
    let floor = FLOOR * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + STEP;
        let up = loss_only(&net, &params, &x, &t);
        params[i] = orig - STEP;
        let down = loss_only(&net, &params, &x, &t);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let scale = analytic[i].abs().max(numeric.abs()).max(floor);
        if scale > 0.0 {
            worst = worst.max((analytic[i] - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_rng, RngSeed};

    fn tiny(seed: u64) -> DenoiserModel {
        let mut rng = seeded_rng(RngSeed(seed), "tiny");
        let mut m = DenoiserModel::init(DenoiserArch { levels: 1, base_channels: 2 }, 0.004, &mut rng).unwrap();
        // nonzero head so upstream gradients flow
        for v in m.tensor_mut("head.weight").unwrap() {
            *v = rng.normal() as f32;
        }
        m
    }

    fn random_sino(rows: usize, cols: usize, amp: f64, seed: u64) -> Sinogram {
        let mut r = seeded_rng(RngSeed(seed), "sino");
        Sinogram::new(Array2::from_shape_fn((rows, cols), |_| amp * r.normal()), 40e6).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_noise_and_identity_denoise() {
        let mut m = tiny(1);
        m.zero_head();
        let s = random_sino(16, 32, 100.0, 2);
        let n = infer_noise(&m, &s).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
        assert_eq!(denoise(&m, &s).unwrap(), s);
    }

    #[test]
    fn residual_identity_and_shape() {
        let m = tiny(3);
        let s = random_sino(16, 32, 100.0, 4);
        let n = infer_noise(&m, &s).unwrap();
        let d = denoise(&m, &s).unwrap();
        assert_eq!(n.shape(), s.shape());
        for ((a, b), c) in d.data().iter().zip(n.data()).zip(s.data()) {
            assert!((a + b - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
        assert_eq!(infer_noise(&m, &s).unwrap(), n);
    }

    #[test]
    fn rejects_indivisible_shape() {
        let m = tiny(5);
        let err = infer_noise(&m, &random_sino(15, 32, 1.0, 6)).unwrap_err();
        assert!(err.to_string().contains("multiples of 2"), "{err}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [7, 20, 30] {
            let m = tiny(seed);
            let s = random_sino(16, 32, 250.0, seed + 1);
            let t = random_sino(16, 32, 50.0, seed + 2);
            let err = gradient_check(&m, &s, &t).unwrap();
            assert!(err < 1e-4, "max relative gradient error {err}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_two_levels() {
        let mut rng = seeded_rng(RngSeed(40), "two");
        let mut m = DenoiserModel::init(DenoiserArch { levels: 2, base_channels: 2 }, 0.004, &mut rng).unwrap();
        for v in m.tensor_mut("head.weight").unwrap() {
            *v = rng.normal() as f32;
        }
        let s = random_sino(16, 32, 250.0, 41);
        let t = random_sino(16, 32, 50.0, 42);
        let err = gradient_check(&m, &s, &t).unwrap();
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn zero_input_zero_target_has_zero_loss_and_head_gradient() {
        let mut m = tiny(10);
        m.zero_head();
        let z = Sinogram::zeros(16, 32, 40e6);
        let (loss, g) = loss_gradient(&m, &z, &z, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        let net = m.unet().unwrap();
        for name in ["head.weight", "head.bias"] {
            assert!(g[net.params.get(name).unwrap().range()].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn loss_scale_scales_gradient() {
        let m = tiny(11);
        let s = random_sino(16, 32, 250.0, 12);
        let t = random_sino(16, 32, 50.0, 13);
        let (l1, g1) = loss_gradient(&m, &s, &t, 1.0).unwrap();
        let (l2, g2) = loss_gradient(&m, &s, &t, 2.0).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-15 * l2.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - 2.0 * a).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn weight_count_mismatch_is_rejected() {
        let mut m = tiny(14);
        m.weights.pop();
        assert!(matches!(m.validate(), Err(Error::Data(_))));
    }
}
