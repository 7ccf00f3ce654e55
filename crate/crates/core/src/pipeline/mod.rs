//! End-to-end stages over directories of artifacts. Every stage writes a
//! `manifest.txt` listing the config hash, input hashes and the SHA-256 of
//! each file it produced, plus a separate `timings.txt`.

mod bench;
mod dataset;
mod plot;
mod report;
mod stages;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use bench::{cmd_bench, BenchReport};
pub use dataset::{cmd_make_dataset, Dataset, DatasetItem, PhantomScan};
pub use plot::{render_bars, render_lines};
pub use report::{
    cmd_report, Report, Verdict, CR_MEAN_GAIN, CR_MIN_FRACTION, DENOISE_MEAN_GAIN_DB, DENOISE_MIN_GAIN_DB, SWEEP_GATED_SIGMA,
};
pub use stages::{cmd_denoise, cmd_metrics, cmd_reconstruct, cmd_train, cmd_unmix, CrSummary, DenoiseSummary, UnmixSummary};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::io::{file_sha256, KeyValue};

pub const MANIFEST: &str = "manifest.txt";
pub const TIMINGS: &str = "timings.txt";
pub const CONFIG_COPY: &str = "config.toml";

/// Errors with [`Error::MissingArtifact`] unless `path` exists.
pub fn require(path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Stage manifest under construction.
pub struct Manifest {
    kv: KeyValue,
}

impl Manifest {
    pub fn new(stage: &str, cfg: &PipelineConfig) -> Result<Self> {
        let mut kv = KeyValue::default();
        kv.set("stage", stage);
        kv.set("config_hash", cfg.hash()?);
        kv.set("toolkit_version", env!("CARGO_PKG_VERSION"));
        Ok(Manifest { kv })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.kv.set(key, value);
    }

    /// Records the hash of an input file, or of a directory's manifest.
    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let target = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
        let hash = file_sha256(require(&target)?)?;
        self.kv.set(format!("input.{name}"), hash);
        Ok(())
    }

    /// Hashes every file under `dir` into `output.<relative path>` and
    /// writes the manifest there.
    pub fn finish(mut self, dir: &Path, cfg: &PipelineConfig) -> Result<()> {
        cfg.save(dir.join(CONFIG_COPY))?;
        for rel in walk_files(dir)? {
            let name = rel.to_string_lossy().replace('\\', "/");
            if name == MANIFEST || name == TIMINGS {
                continue;
            }
            self.kv.set(format!("output.{name}"), file_sha256(dir.join(&rel))?);
        }
        self.kv.set("timings", TIMINGS);
        self.kv.write(dir.join(MANIFEST))
    }
}

/// Relative paths of all regular files below `dir`, sorted.
pub fn walk_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn visit(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                visit(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("walk stays below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    visit(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Wall-clock timings, kept out of the manifest so reruns hash equal.
#[derive(Default)]
pub struct Timings {
    kv: KeyValue,
}

impl Timings {
    pub fn record(&mut self, name: &str, seconds: f64) {
        self.kv.set(format!("{name}_s"), format!("{seconds:.6}"));
    }

    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.record(name, t.elapsed().as_secs_f64());
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.kv.write(dir.join(TIMINGS))
    }
}

/// Creates `dir`, replacing an earlier output of the same stage. A
/// nonempty directory without such a manifest is left alone.
pub(crate) fn prepare_output(dir: &Path, stage: &str) -> Result<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if nonempty {
            let prev = KeyValue::read(dir.join(MANIFEST)).ok();
            if prev.as_ref().and_then(|kv| kv.get("stage")) != Some(stage) {
                return Err(Error::Data(format!(
                    "output directory {} is not empty and holds no earlier {stage} output",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    create_dir(dir)
}
