//! `oatk`: dataset generation, training, denoising, reconstruction,
//! unmixing, metrics, reporting and benchmarking from one config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oatk::config::{DatasetMode, PipelineConfig};
use oatk::pipeline::{
    cmd_bench, cmd_denoise, cmd_make_dataset, cmd_metrics, cmd_reconstruct, cmd_report, cmd_train, cmd_unmix, Verdict,
};
use oatk::Error;

#[derive(Parser)]
#[command(name = "oatk", version, about = "Optoacoustic sinogram denoising toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `<output root>/<stage>`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Config override, `section.key=value`; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; defaults to the available cores.
    #[arg(short, long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of clean sinograms and noise.
    MakeDataset {
        #[command(flatten)]
        common: Common,
        /// Directory of PGM source images; procedural images otherwise.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Dataset kind, overriding `dataset.mode`.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<DatasetMode>,
    },
    /// Train a denoiser on an en or gn dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Denoise a dataset or a directory of sinograms.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Reconstruct images from sinograms.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Spectral unmixing of reconstructed image stacks.
    Unmix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Contrast resolution of phantom reconstructions.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Phantom dataset holding the region masks.
        #[arg(long)]
        dataset: PathBuf,
        /// Output of `reconstruct` run on denoised phantoms.
        #[arg(long)]
        recon: PathBuf,
    },
    /// Aggregate result CSVs into tables, plots and a verdict summary.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        results: PathBuf,
    },
    /// Time denoiser inference on the configured sinogram shape.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Trained model; a freshly initialised one otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<DatasetMode, String> {
    DatasetMode::parse(s).map_err(|e| e.to_string())
}

fn load_config(common: &Common) -> oatk::Result<PipelineConfig> {
    match &common.config {
        Some(p) => PipelineConfig::load_with(p, &common.overrides),
        None => PipelineConfig::from_toml_with("", &common.overrides),
    }
}

fn out_dir(cfg: &PipelineConfig, common: &Common, stage: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output_root().join(stage))
}

fn run(command: Command) -> oatk::Result<()> {
    let common = match &command {
        Command::MakeDataset { common, .. }
        | Command::Train { common, .. }
        | Command::Denoise { common, .. }
        | Command::Reconstruct { common, .. }
        | Command::Unmix { common, .. }
        | Command::Metrics { common, .. }
        | Command::Report { common, .. }
        | Command::Bench { common, .. } => common.clone(),
    };
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    if let Command::Report { results, .. } = &command {
        let out = common.out.clone().unwrap_or_else(|| results.join("report"));
        let rep = cmd_report(results, &out)?;
        for w in &rep.warnings {
            eprintln!("warning: {w}");
        }
        for (name, verdict, detail) in &rep.verdicts {
            println!("{name}: {} {detail}", verdict.as_str());
        }
        println!("wrote {} artifacts to {}", rep.artifacts.len(), out.display());
        if rep.verdicts.iter().any(|v| v.1 == Verdict::Fail) {
            log::warn!("at least one check failed");
        }
        return Ok(());
    }

    let mut cfg = load_config(&common)?;
    match command {
        Command::MakeDataset { images, mode, .. } => {
            if let Some(m) = mode {
                cfg.dataset.mode = m;
            }
            let out = out_dir(&cfg, &common, &format!("dataset_{}", cfg.dataset.mode.as_str()));
            let ds = cmd_make_dataset(&cfg, images.as_deref(), &out)?;
            println!(
                "{} dataset: {} train, {} val, {} test, {} phantom scans in {}",
                ds.mode.as_str(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                ds.scans.len(),
                out.display()
            );
        }
        Command::Train { dataset, .. } => {
            let out = out_dir(&cfg, &common, "train");
            let o = cmd_train(&cfg, &dataset, &out)?;
            println!(
                "trained {} epochs, validation loss {:.6e}, model at {}",
                o.model.fingerprint.epoch,
                o.model.fingerprint.val_loss,
                out.join("model.oaml").display()
            );
        }
        Command::Denoise { model, input, .. } => {
            let out = out_dir(&cfg, &common, "denoise");
            let s = cmd_denoise(&cfg, &model, &input, &out)?;
            print!("denoised {} sinograms, mean latency {:.4} s", s.sinograms, s.mean_latency_s);
            if !s.gains_db.is_empty() {
                let (mean, _) = oatk::metrics::finite_mean(&s.gains_db);
                print!(", mean SNR gain {mean:.2} dB");
            }
            println!(" ({})", out.display());
        }
        Command::Reconstruct { input, .. } => {
            let out = out_dir(&cfg, &common, "recon");
            let n = cmd_reconstruct(&cfg, &input, &out)?;
            println!("reconstructed {n} images into {}", out.display());
        }
        Command::Unmix { input, .. } => {
            let out = out_dir(&cfg, &common, "unmix");
            let s = cmd_unmix(&cfg, &input, &out)?;
            println!(
                "unmixed {} scans, relative error {:.4}, objective {:.6e} ({})",
                s.scans.len(),
                s.relative_error,
                s.objective,
                out.display()
            );
        }
        Command::Metrics { dataset, recon, .. } => {
            let out = out_dir(&cfg, &common, "metrics");
            let cr = cmd_metrics(&cfg, &dataset, &recon, &out)?;
            let g = cr.gains();
            let mean = g.iter().sum::<f64>() / g.len().max(1) as f64;
            println!("{} contrast-resolution pairs, mean gain {mean:.4} ({})", g.len(), out.display());
        }
        Command::Bench { model, .. } => {
            let out = out_dir(&cfg, &common, "bench");
            let rep = cmd_bench(&cfg, model.as_deref(), &out)?;
            println!(
                "{}x{} inference: mean {:.4} s over {} runs",
                rep.shape.0,
                rep.shape.1,
                rep.mean_s(),
                rep.seconds.len()
            );
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
