//! ADAM training with batch size 1 and best-validation checkpointing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::{Fmap, Scalar};
use super::{l1_loss, to_fmap, DenoiserArch, DenoiserModel, Fingerprint, Unet};
use crate::error::{Error, Result};
use crate::noise::NoisyPair;
use crate::rng::{seeded_rng, OaRng, RngSeed};
use crate::types::Sinogram;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: DenoiserArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Number of final epochs over which the learning rate falls linearly.
    pub decay_epochs: usize,
    pub input_scale: f64,
    pub loss_scale: f64,
    pub seed: RngSeed,
    pub validation_fraction: f64,
    /// Steps per epoch; one pass over the signal corpus when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: DenoiserArch::default(),
            epochs: 300,
            batch_size: 1,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_epochs: 50,
            input_scale: 0.004,
            loss_scale: 1.0,
            seed: RngSeed(0),
            validation_fraction: 0.1,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    /// Reduced profile for 64×256 sinograms.
    pub fn desk() -> Self {
        TrainConfig {
            arch: DenoiserArch {
                levels: 4,
                base_channels: 16,
            },
            epochs: 50,
            decay_epochs: 10,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size != 1 {
            return bad(format!("only batch_size = 1 is supported, got {}", self.batch_size));
        }
        if self.decay_epochs > self.epochs {
            return bad(format!("decay_epochs {} exceeds epochs {}", self.decay_epochs, self.epochs));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("input_scale", self.input_scale),
            ("loss_scale", self.loss_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction must lie in (0, 1), got {}", self.validation_fraction));
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(format!("{self:?}").as_bytes()).into()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * lr_factor(epoch, self.epochs, self.decay_epochs)
    }
}

/// Learning-rate multiplier for 0-based `epoch`: 1 until the last
/// `decay` epochs, then falling linearly towards zero.
pub fn lr_factor(epoch: usize, epochs: usize, decay: usize) -> f64 {
    let start = epochs - decay;
    if epoch < start {
        1.0
    } else {
        1.0 - (epoch + 1 - start) as f64 / (decay + 1) as f64
    }
}

/// ADAM with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step = T::of(lr / (1.0 - self.beta1.powi(self.t)));
        let bc2 = T::of((1.0 - self.beta2.powi(self.t)).sqrt());
        let eps = T::of(self.eps);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= step * *m / (v.sqrt() / bc2 + eps);
        }
    }
}

/// Where each step's noise realisation comes from.
pub enum NoiseSource {
    /// Identically zero noise.
    Zero,
    /// Uniform draws from a recorded corpus.
    Corpus(Vec<Sinogram>),
    /// A fresh realisation per call.
    Generator(Box<dyn Fn(&mut OaRng) -> Result<Sinogram> + Send + Sync>),
}

impl NoiseSource {
    pub fn draw(&self, like: &Sinogram, rng: &mut OaRng) -> Result<Sinogram> {
        let n = match self {
            NoiseSource::Zero => Sinogram::zeros(like.n_transducers(), like.n_samples(), like.sample_rate_hz()),
            NoiseSource::Corpus(items) => {
                if items.is_empty() {
                    return Err(Error::Data("noise corpus is empty".into()));
                }
                items[rng.below(items.len())].clone()
            }
            NoiseSource::Generator(f) => f(rng)?,
        };
        like.check_same_shape(&n, "noise realisation")?;
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation loss, including the initial
    /// weights.
    pub model: DenoiserModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// One optimisation step at a time on a single network.
pub struct Trainer<T: Scalar> {
    pub net: Unet,
    pub params: Vec<T>,
    pub buffers: Vec<T>,
    pub adam: Adam<T>,
    pub input_scale: f64,
    pub loss_scale: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig, params: Vec<T>, buffers: Vec<T>) -> Result<Self> {
        let net = Unet::new(cfg.arch)?;
        if params.len() != net.params.len || buffers.len() != net.buffers.len {
            return Err(Error::Data("weight count mismatch between trainer and architecture".into()));
        }
        Ok(Trainer {
            adam: Adam::new(params.len(), cfg.beta1, cfg.beta2, cfg.adam_eps),
            net,
            params,
            buffers,
            input_scale: cfg.input_scale,
            loss_scale: cfg.loss_scale,
        })
    }

    /// Loss and gradient at the current weights; running statistics are
    /// updated.
    pub fn loss_grad(&mut self, input: &Sinogram, target: &Sinogram) -> (f64, Vec<T>) {
        let x: Fmap<T> = to_fmap(input.data(), self.input_scale);
        let t: Vec<T> = target.data().iter().map(|&v| T::of(v * self.input_scale)).collect();
        let (pred, tape) = self.net.forward_train(&self.params, Some(&mut self.buffers), &x);
        let (loss, d) = l1_loss(&pred, &t, self.loss_scale);
        let mut g = vec![T::zero(); self.params.len()];
        self.net.backward(&self.params, &tape, &d, &mut g);
        (loss, g)
    }

    /// One ADAM step on `input → target`; returns the pre-step loss.
    pub fn step(&mut self, input: &Sinogram, target: &Sinogram, lr: f64) -> Result<f64> {
        let (loss, g) = self.loss_grad(input, target);
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss or gradient (loss {loss})")));
        }
        self.adam.step(&mut self.params, &g, lr);
        Ok(loss)
    }

    /// Inference-mode loss on a noisy pair.
    pub fn eval_loss(&self, pair: &NoisyPair) -> f64 {
        let x: Fmap<T> = to_fmap(pair.noisy.data(), self.input_scale);
        let t: Vec<T> = pair.noise.data().iter().map(|&v| T::of(v * self.input_scale)).collect();
        let pred = self.net.forward_eval(&self.params, &self.buffers, &x);
        l1_loss(&pred, &t, self.loss_scale).0
    }
}

/// Splits the signal corpus by `validation_fraction` (after a seeded
/// shuffle), pairs every held-out signal with one fixed noise draw, then
/// trains.
pub fn train(corpus_oa: &[Sinogram], noise: &NoiseSource, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus_oa.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 signal sinograms to split off validation, got {}",
            corpus_oa.len()
        )));
    }
    let mut rng = seeded_rng(cfg.seed, "denoiser/split");
    let mut order: Vec<usize> = (0..corpus_oa.len()).collect();
    rng.shuffle(&mut order);
    let n_val = ((corpus_oa.len() as f64 * cfg.validation_fraction).ceil() as usize).clamp(1, corpus_oa.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut vrng = rng.child("validation-noise");
    let val = val_idx
        .iter()
        .map(|&i| {
            let oa = &corpus_oa[i];
            let n = noise.draw(oa, &mut vrng)?;
            Ok(NoisyPair {
                noisy: oa.with_data(oa.data() + n.data())?,
                noise: n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let train_oa: Vec<Sinogram> = train_idx.iter().map(|&i| corpus_oa[i].clone()).collect();
    train_with_validation(&train_oa, noise, &val, cfg)
}

/// Trains against an explicit validation set.
pub fn train_with_validation(
    train_oa: &[Sinogram],
    noise: &NoiseSource,
    validation: &[NoisyPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_oa.is_empty() || validation.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    for s in train_oa.iter().chain(validation.iter().map(|p| &p.noisy)) {
        let (r, c) = s.shape();
        cfg.arch.check_input(r, c)?;
    }
    let root = seeded_rng(cfg.seed, "denoiser/train");
    let mut init_rng = root.child("init");
    let mut model = DenoiserModel::init(cfg.arch, cfg.input_scale, &mut init_rng)?;
    let hash = cfg.hash();
    let mut trainer: Trainer<f32> = Trainer::new(cfg, model.weights.clone(), model.buffers.clone())?;

    let val_loss = |t: &Trainer<f32>| validation.iter().map(|p| t.eval_loss(p)).sum::<f64>() / validation.len() as f64;
    let mut best = val_loss(&trainer);
    model.fingerprint = Fingerprint {
        config_hash: hash,
        epoch: 0,
        val_loss: best,
    };
    let mut best_epoch = 0;
    let steps = cfg.steps_per_epoch.unwrap_or(train_oa.len());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_oa.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut erng = root.child(&format!("epoch{epoch}"));
        erng.shuffle(&mut order);
        let mut total = 0.0;
        for step in 0..steps {
            let oa = &train_oa[order[step % order.len()]];
            let n = noise.draw(oa, &mut erng)?;
            let noisy = oa.with_data(oa.data() + n.data())?;
            total += trainer.step(&noisy, &n, lr).map_err(|e| {
                Error::Numerical(format!("training diverged at epoch {} step {}: {e}", epoch + 1, step + 1))
            })?;
        }
        let v = val_loss(&trainer);
        if !v.is_finite() {
            return Err(Error::Numerical(format!("validation loss is non-finite after epoch {}", epoch + 1)));
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: total / steps as f64,
            val_loss: v,
            lr,
        };
        log::info!(
            "epoch {}/{}: train {:.6e} val {:.6e} lr {:.3e}",
            entry.epoch,
            cfg.epochs,
            entry.train_loss,
            v,
            lr
        );
        log.push(entry);
        if v < best {
            best = v;
            best_epoch = epoch + 1;
            model.weights.clone_from(&trainer.params);
            model.buffers.clone_from(&trainer.buffers);
            model.fingerprint = Fingerprint {
                config_hash: hash,
                epoch: best_epoch as u32,
                val_loss: v,
            };
        }
    }
    Ok(TrainOutcome { model, best_epoch, log })
}

pub fn write_train_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "train_loss", "val_loss", "lr"]).map_err(wrap)?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.9e}", e.train_loss),
            format!("{:.9e}", e.val_loss),
            format!("{:.9e}", e.lr),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            arch: DenoiserArch { levels: 1, base_channels: 2 },
            epochs: 3,
            decay_epochs: 1,
            learning_rate: 1e-3,
            seed: RngSeed(5),
            validation_fraction: 0.25,
            ..Default::default()
        }
    }

    fn corpus(n: usize) -> Vec<Sinogram> {
        let mut r = seeded_rng(RngSeed(9), "corpus");
        (0..n)
            .map(|_| Sinogram::new(Array2::from_shape_fn((8, 16), |_| 100.0 * r.normal()), 40e6).unwrap())
            .collect()
    }

    #[test]
    fn lr_schedule_is_flat_then_linear() {
        assert_eq!(lr_factor(0, 300, 50), 1.0);
        assert_eq!(lr_factor(249, 300, 50), 1.0);
        assert!((lr_factor(250, 300, 50) - 50.0 / 51.0).abs() < 1e-15);
        assert!((lr_factor(299, 300, 50) - 1.0 / 51.0).abs() < 1e-15);
        let f: Vec<f64> = (250..300).map(|e| lr_factor(e, 300, 50)).collect();
        assert!(f.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn adam_single_step_matches_hand_update() {
        let cfg = tiny_cfg();
        let net = Unet::new(cfg.arch).unwrap();
        let mut rng = seeded_rng(RngSeed(1), "adam");
        let (mut p, b) = net.init::<f64>(&mut rng);
        let hw = net.params.get("head.weight").unwrap().range();
        p[hw].iter_mut().for_each(|v| *v = rng.normal());
        let mut t = Trainer::new(&TrainConfig { learning_rate: 1e-4, ..cfg }, p.clone(), b).unwrap();
        let s = &corpus(2)[0];
        let target = s.with_data(s.data() * 0.3).unwrap();
        let (_, g) = t.clone_grad(s, &target);
        t.step(s, &target, 1e-4).unwrap();
        for ((w0, w1), g) in p.iter().zip(&t.params).zip(&g) {
            // first step: m̂ = g, v̂ = g²
            let m = (1.0 - 0.5) * g;
            let v = (1.0 - 0.999) * g * g;
            let mhat = m / (1.0 - 0.5);
            let vhat = v / (1.0 - 0.999);
            let expect = w0 - 1e-4 * mhat / (vhat.sqrt() + 1e-8);
            assert!((w1 - expect).abs() < 1e-12, "{w1} vs {expect}");
        }
    }

    impl Trainer<f64> {
        fn clone_grad(&self, s: &Sinogram, t: &Sinogram) -> (f64, Vec<f64>) {
            let mut c = Trainer {
                net: self.net.clone(),
                params: self.params.clone(),
                buffers: self.buffers.clone(),
                adam: self.adam.clone(),
                input_scale: self.input_scale,
                loss_scale: self.loss_scale,
            };
            c.loss_grad(s, t)
        }
    }

    #[test]
    fn zero_noise_keeps_zero_loss() {
        let out = train(&corpus(8), &NoiseSource::Zero, &tiny_cfg()).unwrap();
        assert_eq!(out.model.fingerprint.val_loss, 0.0);
        assert!(out.log.iter().all(|e| e.val_loss >= out.model.fingerprint.val_loss));
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn training_is_reproducible() {
        let noise = NoiseSource::Generator(Box::new(|r: &mut OaRng| {
            Sinogram::new(Array2::from_shape_fn((8, 16), |_| 20.0 * r.normal()), 40e6)
        }));
        let a = train(&corpus(8), &noise, &tiny_cfg()).unwrap();
        let b = train(&corpus(8), &noise, &tiny_cfg()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert!(a.model.fingerprint.val_loss <= a.log[0].val_loss.max(a.model.fingerprint.val_loss));
    }

    #[test]
    fn non_finite_noise_aborts_with_location() {
        let noise = NoiseSource::Generator(Box::new(|_: &mut OaRng| {
            Ok(Sinogram::zeros(8, 16, 40e6).with_data(Array2::from_elem((8, 16), 1e38)).unwrap())
        }));
        let cfg = TrainConfig {
            input_scale: 1e3,
            ..tiny_cfg()
        };
        let err = train(&corpus(8), &noise, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Numerical(_)), "{msg}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        let bad = TrainConfig {
            decay_epochs: 400,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_ne!(TrainConfig::default().hash(), TrainConfig::desk().hash());
    }

    #[test]
    fn log_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_train_log(
            &[EpochLog {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                lr: 1e-4,
            }],
            &p,
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,lr\n1,"));
    }
}
