//! Binary sinogram/image formats, PGM previews and key=value manifests.
//!
//! `OASG` (sinogram), little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `OASG` |
//! | 2     | version `u16` = 1 |
//! | 4     | `n_transducers: u32` |
//! | 4     | `n_samples: u32` |
//! | 8     | `sample_rate_hz: f64` |
//! | 4     | `wavelength_nm: f32`, NaN when absent |
//! | 4·d·t | samples `f32`, transducer-major |
//!
//! `OAIM` (image) uses the same layout with `n_x: u32`, `n_y: u32`,
//! `extent_m: f64` and row-major `f32` pixels.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{ImageGrid, MultispectralStack, Sinogram};

pub const SINOGRAM_MAGIC: &[u8; 4] = b"OASG";
pub const IMAGE_MAGIC: &[u8; 4] = b"OAIM";
pub const FORMAT_VERSION: u16 = 1;
pub const SINOGRAM_HEADER_LEN: usize = 26;
pub const IMAGE_HEADER_LEN: usize = 22;

pub fn encode_sinogram(s: &Sinogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(SINOGRAM_HEADER_LEN + 4 * s.data().len());
    out.extend_from_slice(SINOGRAM_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(s.n_transducers() as u32).to_le_bytes());
    out.extend_from_slice(&(s.n_samples() as u32).to_le_bytes());
    out.extend_from_slice(&s.sample_rate_hz().to_le_bytes());
    let wl = s.wavelength_nm().map_or(f32::NAN, |w| w as f32);
    out.extend_from_slice(&wl.to_le_bytes());
    for v in s.data().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_sinogram(s: &Sinogram, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_sinogram(s))
}

pub fn decode_sinogram(bytes: &[u8], path: &Path) -> Result<Sinogram> {
    check_magic(bytes, SINOGRAM_MAGIC, "OASG", path)?;
    check_len(bytes, SINOGRAM_HEADER_LEN, path)?;
    check_version(bytes, path)?;
    let n_d = u32_at(bytes, 6) as usize;
    let n_t = u32_at(bytes, 10) as usize;
    let fs = f64::from_le_bytes(bytes[14..22].try_into().unwrap());
    let wl = f32::from_le_bytes(bytes[22..26].try_into().unwrap());
    let samples = decode_f32_payload(bytes, SINOGRAM_HEADER_LEN, n_d * n_t, path)?;
    let data = Array2::from_shape_vec((n_d, n_t), samples)
        .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))?;
    let s = Sinogram::new(data, fs).map_err(|e| annotate(e, path))?;
    Ok(s.with_wavelength(if wl.is_nan() { None } else { Some(wl as f64) }))
}

pub fn read_sinogram(path: impl AsRef<Path>) -> Result<Sinogram> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sinogram(&bytes, path)
}

pub fn encode_image(img: &ImageGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + 4 * img.pixels().len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(img.n_x() as u32).to_le_bytes());
    out.extend_from_slice(&(img.n_y() as u32).to_le_bytes());
    out.extend_from_slice(&img.extent_m().to_le_bytes());
    for v in img.pixels().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_image(img: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_image(img))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_magic(&bytes, IMAGE_MAGIC, "OAIM", path)?;
    check_len(&bytes, IMAGE_HEADER_LEN, path)?;
    check_version(&bytes, path)?;
    let n_x = u32_at(&bytes, 6) as usize;
    let n_y = u32_at(&bytes, 10) as usize;
    let extent = f64::from_le_bytes(bytes[14..22].try_into().unwrap());
    let px = decode_f32_payload(&bytes, IMAGE_HEADER_LEN, n_x * n_y, path)?;
    let pixels = Array2::from_shape_vec((n_y, n_x), px)
        .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))?;
    ImageGrid::new(pixels, extent).map_err(|e| annotate(e, path))
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::NonFinite { index, .. } => Error::NonFinite {
            context: path.display().to_string(),
            index,
        },
        other => other,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn check_magic(bytes: &[u8], magic: &[u8; 4], name: &'static str, path: &Path) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 4,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            found: bytes[..4].try_into().unwrap(),
            expected: name,
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], len: usize, path: &Path) -> Result<()> {
    if bytes.len() < len {
        return Err(Error::Truncated {
            path: path.into(),
            expected: len as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

fn check_version(bytes: &[u8], path: &Path) -> Result<()> {
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            version,
        });
    }
    Ok(())
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn decode_f32_payload(bytes: &[u8], header: usize, count: usize, path: &Path) -> Result<Vec<f64>> {
    let expected = header + 4 * count;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

/// 8- or 16-bit grayscale samples of a binary PGM.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    /// Samples divided by `maxval`, indexed `[row, col]`.
    pub fn to_unit_array(&self) -> Array2<f64> {
        let scale = 1.0 / self.maxval as f64;
        Array2::from_shape_fn((self.height, self.width), |(r, c)| {
            self.samples[r * self.width + c] as f64 * scale
        })
    }
}

pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let bad = |why: &str| Error::Data(format!("{}: not a P5 PGM ({why})", path.display()));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 signature"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    // exactly one whitespace byte separates header from raster
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("bad dimensions or maxval"));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bps;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            expected: (pos + need) as u64,
            actual: bytes.len() as u64,
        });
    }
    let samples = if bps == 1 {
        raster[..need].iter().map(|&b| b as u16).collect()
    } else {
        raster[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn encode_pgm(pgm: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).into_bytes();
    if pgm.maxval < 256 {
        out.extend(pgm.samples.iter().map(|&v| v as u8));
    } else {
        for v in &pgm.samples {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}

pub fn write_pgm(pgm: &Pgm, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(pgm))
}

/// Min–max quantisation of a real array to a 16-bit PGM; returns the
/// `(min, max)` used.
pub fn array_to_pgm16(values: &Array2<f64>) -> (Pgm, f64, f64) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let samples = values
        .iter()
        .map(|&v| (((v - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let (h, w) = values.dim();
    (
        Pgm {
            width: w,
            height: h,
            maxval: 65535,
            samples,
        },
        lo,
        hi,
    )
}

/// Writes `path` as a 16-bit preview and `path.txt` recording the
/// normalisation.
pub fn write_preview(values: &Array2<f64>, path: impl AsRef<Path>, transform: &str) -> Result<()> {
    let path = path.as_ref();
    let (pgm, lo, hi) = array_to_pgm16(values);
    write_pgm(&pgm, path)?;
    let mut kv = KeyValue::default();
    kv.set("normalization", "min-max");
    kv.set("min", lo);
    kv.set("max", hi);
    kv.set("transform", transform);
    kv.write(sidecar_path(path))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Ordered `key=value` text file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValue {
    entries: BTreeMap<String, String>,
}

impl KeyValue {
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Data(format!("manifest is missing key {key:?}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Data(format!("manifest key {key:?} has unparsable value {raw:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValue::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("manifest line {} lacks '='", n + 1)))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

pub const STACK_MANIFEST: &str = "manifest.txt";

fn stack_entry_name(index: usize, wavelength: f64, ext: &str) -> String {
    format!("{index:03}_{wavelength:.0}nm.{ext}")
}

/// Writes a sinogram stack as a directory of OASG files plus manifest.
pub fn write_sinogram_stack(
    stack: &MultispectralStack<Sinogram>,
    dir: impl AsRef<Path>,
    extra: &KeyValue,
) -> Result<()> {
    write_stack(stack, dir.as_ref(), extra, "oasg", |s, p| write_sinogram(s, p))
}

pub fn write_image_stack(
    stack: &MultispectralStack<ImageGrid>,
    dir: impl AsRef<Path>,
    extra: &KeyValue,
) -> Result<()> {
    write_stack(stack, dir.as_ref(), extra, "oaim", |s, p| write_image(s, p))
}

fn write_stack<T: crate::types::Dims>(
    stack: &MultispectralStack<T>,
    dir: &Path,
    extra: &KeyValue,
    ext: &str,
    write: fn(&T, &Path) -> Result<()>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut kv = extra.clone();
    let wavelengths: Vec<String> = stack.wavelengths().iter().map(|w| format!("{w}")).collect();
    kv.set("count", stack.len());
    kv.set("wavelengths", wavelengths.join(","));
    if let Some((_, first)) = stack.entries().first() {
        let (a, b) = first.dims();
        kv.set("dims", format!("{a}x{b}"));
    }
    let mut files = Vec::new();
    for (i, (wl, item)) in stack.entries().iter().enumerate() {
        let name = stack_entry_name(i, *wl, ext);
        write(item, &dir.join(&name))?;
        files.push(name);
    }
    kv.set("files", files.join(","));
    kv.write(dir.join(STACK_MANIFEST))
}

fn stack_files(dir: &Path) -> Result<(KeyValue, Vec<(f64, PathBuf)>)> {
    let manifest = dir.join(STACK_MANIFEST);
    if !manifest.exists() {
        return Err(Error::MissingArtifact(manifest));
    }
    let kv = KeyValue::read(&manifest)?;
    let wl: Vec<f64> = split_list(kv.require("wavelengths")?)
        .map(|w| w.parse().map_err(|_| Error::Data(format!("bad wavelength {w:?}"))))
        .collect::<Result<_>>()?;
    let files: Vec<PathBuf> = split_list(kv.require("files")?).map(|f| dir.join(f)).collect();
    if wl.len() != files.len() {
        return Err(Error::Data(format!(
            "{}: {} wavelengths but {} files",
            manifest.display(),
            wl.len(),
            files.len()
        )));
    }
    Ok((kv, wl.into_iter().zip(files).collect()))
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

pub fn read_sinogram_stack(dir: impl AsRef<Path>) -> Result<(MultispectralStack<Sinogram>, KeyValue)> {
    let (kv, files) = stack_files(dir.as_ref())?;
    let entries = files
        .into_iter()
        .map(|(wl, f)| Ok((wl, read_sinogram(&f)?.with_wavelength(Some(wl)))))
        .collect::<Result<Vec<_>>>()?;
    Ok((MultispectralStack::new(entries)?, kv))
}

pub fn read_image_stack(dir: impl AsRef<Path>) -> Result<(MultispectralStack<ImageGrid>, KeyValue)> {
    let (kv, files) = stack_files(dir.as_ref())?;
    let entries = files
        .into_iter()
        .map(|(wl, f)| Ok((wl, read_image(&f)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((MultispectralStack::new(entries)?, kv))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn zero_sinogram_layout() {
        let s = Sinogram::zeros(2, 3, 40e6);
        let bytes = encode_sinogram(&s);
        assert_eq!(bytes.len(), SINOGRAM_HEADER_LEN + 24);
        assert!(bytes[SINOGRAM_HEADER_LEN..].iter().all(|&b| b == 0));
    }

    #[test]
    fn golden_header_bytes() {
        let s = Sinogram::new(Array2::from_elem((1, 1), 1.0), 40e6)
            .unwrap()
            .with_wavelength(Some(800.0));
        let bytes = encode_sinogram(&s);
        let mut golden = Vec::new();
        golden.extend_from_slice(b"OASG");
        golden.extend_from_slice(&[1, 0]);
        golden.extend_from_slice(&[1, 0, 0, 0]);
        golden.extend_from_slice(&[1, 0, 0, 0]);
        // 40e6 as f64, little-endian
        golden.extend_from_slice(&[0, 0, 0, 0, 0xd0, 0x12, 0x83, 0x41]);
        // 800.0 as f32
        golden.extend_from_slice(&[0, 0, 0x48, 0x44]);
        // 1.0 as f32
        golden.extend_from_slice(&[0, 0, 0x80, 0x3f]);
        assert_eq!(bytes, golden);
    }

    #[test]
    fn full_scale_payload_size() {
        let s = Sinogram::zeros(256, 1808, 40e6);
        assert_eq!(encode_sinogram(&s).len() - SINOGRAM_HEADER_LEN, 1_851_392);
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tmp();
        let p = dir.path().join("x.oasg");
        let mut bytes = encode_sinogram(&Sinogram::zeros(2, 2, 1.0));
        bytes[..4].copy_from_slice(b"XXXX");
        fs::write(&p, bytes).unwrap();
        match read_sinogram(&p) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(&found, b"XXXX"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_names_byte_counts() {
        let dir = tmp();
        let p = dir.path().join("t.oasg");
        let bytes = encode_sinogram(&Sinogram::zeros(4, 4, 1.0));
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        match read_sinogram(&p) {
            Err(e @ Error::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 10);
                let msg = e.to_string();
                assert!(msg.contains(&expected.to_string()) && msg.contains(&actual.to_string()));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_sample_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("n.oasg");
        let mut bytes = encode_sinogram(&Sinogram::zeros(2, 2, 1.0));
        let at = SINOGRAM_HEADER_LEN + 8;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_sinogram(&p), Err(Error::NonFinite { index: 2, .. })));
    }

    #[test]
    fn image_round_trip() {
        let dir = tmp();
        let p = dir.path().join("i.oaim");
        let img = ImageGrid::new(Array2::from_shape_fn((3, 5), |(r, c)| (r * 5 + c) as f64), 0.01).unwrap();
        write_image(&img, &p).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
    }

    #[test]
    fn pgm_parses_comments_and_16_bit() {
        let bytes = b"P5\n# comment\n2 1\n65535\n\x00\x01\xff\xff";
        let pgm = parse_pgm(bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(pgm.samples, vec![1, 65535]);
        let eight = encode_pgm(&Pgm {
            width: 2,
            height: 2,
            maxval: 255,
            samples: vec![0, 1, 2, 255],
        });
        let back = parse_pgm(&eight, Path::new("y.pgm")).unwrap();
        assert_eq!(back.samples, vec![0, 1, 2, 255]);
        assert!(parse_pgm(b"P2\n1 1\n255\n0", Path::new("z")).is_err());
    }

    #[test]
    fn stack_directory_round_trip() {
        let dir = tmp();
        let mk = |v: f64| Sinogram::new(Array2::from_elem((2, 3), v), 40e6).unwrap();
        let stack = MultispectralStack::new(vec![(700.0, mk(1.0)), (710.0, mk(2.0))]).unwrap();
        let mut extra = KeyValue::default();
        extra.set("scan", "a");
        write_sinogram_stack(&stack, dir.path(), &extra).unwrap();
        let (back, kv) = read_sinogram_stack(dir.path()).unwrap();
        assert_eq!(kv.get("scan"), Some("a"));
        assert_eq!(kv.get("count"), Some("2"));
        assert_eq!(back.wavelengths(), vec![700.0, 710.0]);
        assert_eq!(back.entries()[1].1.data(), stack.entries()[1].1.data());
    }

    proptest! {
        #[test]
        fn sinogram_round_trip_is_bit_exact(
            d in 1usize..6,
            t in 1usize..20,
            seed in any::<u64>(),
            wl in proptest::option::of(600.0f32..1000.0),
        ) {
            let mut rng = crate::rng::seeded_rng(crate::rng::RngSeed(seed), "io");
            let data = Array2::from_shape_fn((d, t), |_| (rng.normal() * 100.0) as f32 as f64);
            let s = Sinogram::new(data, 40e6).unwrap().with_wavelength(wl.map(|w| w as f64));
            let back = decode_sinogram(&encode_sinogram(&s), Path::new("mem")).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
