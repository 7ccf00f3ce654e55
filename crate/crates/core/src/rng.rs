//! Deterministic, label-separated random streams.
//!
//! Every stream is a ChaCha20 keystream (20 rounds, stream id 0, counter
//! starting at 0). The 256-bit key is `SHA-256("oatk-rng-v1" || seed as
//! u64 little-endian || label as UTF-8)`. Draws are defined on top of the
//! raw `u64` words so that other implementations can reproduce them:
//!
//! * `uniform()`: `(word >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal()`: Box–Muller cosine branch, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`,
//!   consuming two uniforms per draw.
//! * `below(n)`: `floor(uniform() * n)`.
//! * `poisson(λ)`: Knuth's product-of-uniforms method.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Root seed of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}

/// A single-owner random stream identified by `(seed, label)`.
#[derive(Debug, Clone)]
pub struct OaRng {
    seed: RngSeed,
    label: String,
    inner: ChaCha20Rng,
}

/// Opens the stream for `(seed, label)`.
pub fn seeded_rng(seed: RngSeed, stream_label: &str) -> OaRng {
    let mut hasher = Sha256::new();
    hasher.update(b"oatk-rng-v1");
    hasher.update(seed.0.to_le_bytes());
    hasher.update(stream_label.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    OaRng {
        seed,
        label: stream_label.to_owned(),
        inner: ChaCha20Rng::from_seed(key),
    }
}

impl OaRng {
    pub fn seed(&self) -> RngSeed {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Independent stream labelled `"{parent}/{label}"`.
    pub fn child(&self, label: &str) -> OaRng {
        seeded_rng(self.seed, &format!("{}/{}", self.label, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Integer in the inclusive range `[lo, hi]`.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi, "empty integer range");
        lo + self.below((hi - lo + 1) as usize) as i64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn poisson(&mut self, mean: f64) -> usize {
        if mean <= 0.0 {
            return 0;
        }
        let limit = (-mean).exp();
        let mut k = 0usize;
        let mut p = self.uniform();
        while p > limit {
            k += 1;
            p *= self.uniform();
        }
        k
    }

    /// Fisher–Yates shuffle, walking from the last element down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
