mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use wmark_core::dataset::{compute_stats, generate_split, load_pages, read_text_boxes, Catalogs, Manifest};
use wmark_core::evaluation::{evaluate_detection, evaluate_recognition, PredictionFile};
use wmark_core::selfcheck::{run_selfcheck, SelfCheckOptions};
use wmark_core::Error;

use crate::config::GenerateConfig;

/// Synthetic watermark dataset generation and evaluation.
#[derive(Debug, Parser)]
#[command(name = "wmark", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a watermarked split from clean pages.
    Generate {
        /// TOML configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Regenerate the split once per epoch into `epoch-NNN` subdirectories.
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Watermark count and overlap statistics for a split.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON map of image id to document text boxes.
        #[arg(long)]
        text_boxes: Option<PathBuf>,
        /// Where to write the statistics (default: stats.json beside the manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detection mAP / mAR of a prediction file.
    EvalDet {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Character accuracy of recognized words.
    EvalRec {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Use the majority of per-box texts as the page prediction.
        #[arg(long)]
        vote: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in numerical checks.
    Selfcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// A message and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    const CHECK: u8 = 1;
    const CONFIG: u8 = 2;
    const IO: u8 = 3;

    pub fn check(message: impl Into<String>) -> Self {
        Self { code: Self::CHECK, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: Self::CONFIG, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: Self::IO, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Image { .. } => Self::IO,
            Error::Config(_)
            | Error::Parameter(_)
            | Error::Json { .. }
            | Error::Font(_)
            | Error::UnknownImages(_) => Self::CONFIG,
            _ => Self::CHECK,
        };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Failure::CONFIG } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { config, seed, out, epochs } => generate(&config, seed, out, epochs),
        Command::Stats { manifest, text_boxes, out } => stats(&manifest, text_boxes.as_deref(), out),
        Command::EvalDet { manifest, predictions, out } => eval_det(&manifest, &predictions, out.as_deref()),
        Command::EvalRec { manifest, predictions, vote, out } => eval_rec(&manifest, &predictions, vote, out.as_deref()),
        Command::Selfcheck { seed } => selfcheck(seed),
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::config(format!("{what} directory {} does not exist", path.display())))
    }
}

fn require_files(paths: &[PathBuf], what: &str) -> Result<(), Failure> {
    match paths.iter().find(|p| !p.is_file()) {
        Some(p) => Err(Failure::config(format!("{what} {} does not exist", p.display()))),
        None => Ok(()),
    }
}

fn generate(config: &Path, seed: Option<u64>, out: Option<PathBuf>, epochs: Option<u64>) -> Result<(), Failure> {
    let mut cfg = GenerateConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Failure::config("no output directory; set `out` or pass --out"))?;
    let generator = cfg.generator()?;
    require_dir(&cfg.pages, "page")?;
    require_dir(&cfg.fonts, "font")?;
    require_files(&cfg.words, "word list")?;
    let catalogs = Catalogs::load(&cfg.fonts, &cfg.words)?;
    if let Some(other) = &cfg.disjoint_from {
        require_dir(&other.fonts, "font")?;
        require_files(&other.words, "word list")?;
        catalogs.check_disjoint(&Catalogs::load(&other.fonts, &other.words)?)?;
    }
    let pages = load_pages(&cfg.pages)?;
    if pages.is_empty() {
        log::warn!("no pages found in {}", cfg.pages.display());
    }

    let runs: Vec<(Option<u64>, PathBuf)> = match epochs {
        None => vec![(None, out)],
        Some(n) => (0..n).map(|e| (Some(e), out.join(format!("epoch-{e:03}")))).collect(),
    };
    let mut failed = 0;
    for (epoch, dir) in runs {
        let result = generate_split(&cfg.split, &pages, &catalogs, &generator, epoch, &dir)?;
        for f in &result.failures {
            log::error!("page {}: {}", f.image_id, f.message);
        }
        failed += result.failures.len();
        println!(
            "wrote {} pages to {}{}",
            result.manifest.records.len(),
            dir.display(),
            if result.failures.is_empty() { String::new() } else { format!(" ({} failed)", result.failures.len()) }
        );
    }
    if failed > 0 {
        return Err(Failure::check(format!("{failed} pages failed to render")));
    }
    Ok(())
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, json + "\n").map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

fn stats(manifest_path: &Path, text_boxes: Option<&Path>, out: Option<PathBuf>) -> Result<(), Failure> {
    let manifest = Manifest::read(manifest_path)?;
    let boxes = text_boxes.map(read_text_boxes).transpose()?;
    let base = manifest_dir(manifest_path);
    let s = compute_stats(&manifest, &base, boxes.as_ref())?;
    println!("split            {}", manifest.split);
    println!("pages            {}", s.pages);
    println!("watermarks       {}", s.total_watermarks);
    println!("count mean/std   {:.2} / {:.2}", s.count_mean, s.count_std);
    println!("count median     {}", s.count_median);
    println!("overlap % ({})", s.overlap_source);
    println!("  mean/std       {:.2} / {:.2}", s.overlap_mean, s.overlap_std);
    println!("  median         {:.2}", s.overlap_median);
    write_json(&s, &out.unwrap_or_else(|| base.join("stats.json")))
}

fn eval_det(manifest: &Path, predictions: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let m = Manifest::read(manifest)?;
    let p = PredictionFile::read(predictions)?;
    let r = evaluate_detection(&m, &p)?;
    if r.vacuous {
        println!("no ground truth and no predictions; metrics are vacuously perfect");
    }
    for (name, v) in [
        ("mAP", r.map),
        ("AP50", r.ap50),
        ("AP75", r.ap75),
        ("mAR", r.mar),
        ("AR50", r.ar50),
        ("AR75", r.ar75),
    ] {
        println!("{name:<5} {:6.2}", 100.0 * v);
    }
    match out {
        Some(o) => write_json(&r, o),
        None => Ok(()),
    }
}

fn eval_rec(manifest: &Path, predictions: &Path, vote: bool, out: Option<&Path>) -> Result<(), Failure> {
    let m = Manifest::read(manifest)?;
    let p = PredictionFile::read(predictions)?;
    let r = evaluate_recognition(&m, &p, vote)?;
    println!(
        "character accuracy {:.2} ± {:.2} over {} pages",
        100.0 * r.mean,
        100.0 * r.std,
        r.pages.len()
    );
    match out {
        Some(o) => write_json(&r, o),
        None => Ok(()),
    }
}

fn selfcheck(seed: Option<u64>) -> Result<(), Failure> {
    let mut opts = SelfCheckOptions::default();
    if let Some(s) = seed {
        opts.seed = s;
    }
    let results = run_selfcheck(&opts);
    for r in &results {
        println!("{} {:<24} {:>6} ms  {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.millis, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::check(format!("self-check failed: {}", failed.join(", "))))
    }
}
