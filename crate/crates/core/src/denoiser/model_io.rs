//! OAML model files: little-endian header, f32 weights, f32 running
//! statistics.

use std::path::Path;

use super::{DenoiserArch, DenoiserModel, Fingerprint};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"OAML";
pub const MODEL_VERSION: u16 = 1;
/// magic, version, levels, base, input scale, fingerprint, counts.
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 8 + 32 + 4 + 8 + 8 + 8;

pub fn encode_model(m: &DenoiserModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (m.weights.len() + m.buffers.len()));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.arch.levels as u32).to_le_bytes());
    out.extend_from_slice(&(m.arch.base_channels as u32).to_le_bytes());
    out.extend_from_slice(&m.input_scale.to_le_bytes());
    out.extend_from_slice(&m.fingerprint.config_hash);
    out.extend_from_slice(&m.fingerprint.epoch.to_le_bytes());
    out.extend_from_slice(&m.fingerprint.val_loss.to_le_bytes());
    out.extend_from_slice(&(m.weights.len() as u64).to_le_bytes());
    out.extend_from_slice(&(m.buffers.len() as u64).to_le_bytes());
    for v in m.weights.iter().chain(&m.buffers) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut b = [0; N];
        b.copy_from_slice(&self.bytes[self.at..self.at + N]);
        self.at += N;
        b
    }
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<DenoiserModel> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut c = Cursor { bytes, at: 0 };
    let magic: [u8; 4] = c.take();
    if &magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: "OAML",
        });
    }
    let version = u16::from_le_bytes(c.take());
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let levels = u32::from_le_bytes(c.take()) as usize;
    let base_channels = u32::from_le_bytes(c.take()) as usize;
    let input_scale = f64::from_le_bytes(c.take());
    let config_hash = c.take::<32>();
    let epoch = u32::from_le_bytes(c.take());
    let val_loss = f64::from_le_bytes(c.take());
    let n_w = u64::from_le_bytes(c.take());
    let n_b = u64::from_le_bytes(c.take());
    let expected = (HEADER_LEN as u64).saturating_add(n_w.saturating_add(n_b).saturating_mul(4));
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let floats: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
        .collect();
    let (weights, buffers) = floats.split_at(n_w as usize);
    let m = DenoiserModel {
        arch: DenoiserArch { levels, base_channels },
        input_scale,
        weights: weights.to_vec(),
        buffers: buffers.to_vec(),
        fingerprint: Fingerprint {
            config_hash,
            epoch,
            val_loss,
        },
    };
    m.validate().map_err(|e| match e {
        Error::Data(msg) | Error::Config(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(m)
}

pub fn save_model(m: &DenoiserModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    m.validate()?;
    std::fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::infer_noise;
    use crate::rng::{seeded_rng, RngSeed};
    use crate::types::Sinogram;
    use ndarray::Array2;

    fn model() -> DenoiserModel {
        let mut rng = seeded_rng(RngSeed(3), "io");
        let mut m = DenoiserModel::init(DenoiserArch { levels: 2, base_channels: 3 }, 0.004, &mut rng).unwrap();
        for v in m.tensor_mut("head.weight").unwrap() {
            *v = 0.25;
        }
        m.fingerprint = Fingerprint {
            config_hash: [7; 32],
            epoch: 12,
            val_loss: 0.125,
        };
        m
    }

    #[test]
    fn round_trip_is_bit_exact_and_inference_matches() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.oaml");
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, m);
        let s = Sinogram::new(Array2::from_shape_fn((8, 16), |(i, j)| (i * 16 + j) as f64 - 60.0), 40e6).unwrap();
        let a = infer_noise(&m, &s).unwrap();
        let b = infer_noise(&back, &s).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupted_weight_count_is_a_mismatch() {
        let m = model();
        let mut bytes = encode_model(&m);
        // drop one weight but keep the file self-consistent
        let nw_at = HEADER_LEN - 16;
        let n = u64::from_le_bytes(bytes[nw_at..nw_at + 8].try_into().unwrap()) - 1;
        bytes[nw_at..nw_at + 8].copy_from_slice(&n.to_le_bytes());
        bytes.truncate(bytes.len() - 4);
        let err = decode_model(&bytes, Path::new("x.oaml")).unwrap_err();
        assert!(err.to_string().contains("weight count mismatch"), "{err}");
    }

    #[test]
    fn truncated_file_is_reported() {
        let bytes = encode_model(&model());
        let err = decode_model(&bytes[..bytes.len() - 3], Path::new("x.oaml")).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
        let err = decode_model(&bytes[..10], Path::new("x.oaml")).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = encode_model(&model());
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes, Path::new("x")), Err(Error::BadMagic { .. })));
    }
}
