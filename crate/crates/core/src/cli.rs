//! `clpst` command line: train, embed, extract, eval, ablate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ablation_suite, evaluate, write_record, EvalOptions};
use crate::networks::{ModelConfig, StegoModel};
use crate::payload::{encode_payload, flatten_payload, load_image_native, threshold_bits, BitPayload};
use crate::trainer::{load_manifest_images, run_training, variant_config, TrainConfig, VARIANTS};

pub const DEVICE_ENV: &str = "CLPST_DEVICE";

#[derive(Parser, Debug)]
#[command(name = "clpst", version, about = "Hide bit planes in images with a trained encoder/decoder pair")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a manifest of cover images.
    Train(TrainArgs),
    /// Hide a payload file in a cover image.
    Embed(EmbedArgs),
    /// Recover payload bits from a container image.
    Extract(ExtractArgs),
    /// Report quality and decode metrics of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train and compare architecture variants under one budget.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "clpstnet")]
    pub variant: String,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cover: PathBuf,
    /// Payload file; its bytes are read most-significant bit first.
    #[arg(long)]
    pub payload: PathBuf,
    /// Embed only the first N payload bits.
    #[arg(long)]
    pub bits: Option<usize>,
    /// Output container (always written as PNG).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stego: PathBuf,
    #[arg(long)]
    pub bits: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory receiving `{variant}_{dataset}_{D}bpp.json`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset label; defaults to the manifest file stem.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Skip the encoder (containers equal covers).
    #[arg(long)]
    pub bypass: bool,
    /// Fail unless the checkpoint embeds this many bit planes.
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated variant names.
    #[arg(long, default_value = "")]
    pub variants: String,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seed: u64,
    pub image_size: usize,
    pub msssim_scales: usize,
    pub dataset: Option<String>,
    pub manifests: Vec<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 128,
            msssim_scales: 4,
            dataset: None,
            manifests: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// The TOML document accepted by `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map(Self::load).unwrap_or_else(|| Ok(Self::default()))
    }
}

/// Device named by `CLPST_DEVICE`; unset means CPU.
pub fn device_from_env() -> Result<Device> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(Device::Cpu),
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("cpu") => Ok(Device::Cpu),
        Ok(v) => Err(Error::Config(format!(
            "{DEVICE_ENV}=`{v}` is not supported; this build runs on `cpu` only"
        ))),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ConfigMismatch(_) | Error::UnknownVariant(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn required(flag: Option<PathBuf>, from_config: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or(from_config)
        .ok_or_else(|| Error::Config(format!("no {what} given (flag --{what} or [paths].{what})")))
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = ConfigFile::load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    variant_config(&a.variant, &cfg.model)?;
    let manifest = required(a.manifest, cfg.paths.manifest.clone(), "manifest")?;
    let out = required(a.out, cfg.paths.out.clone(), "out")?;
    let device = device_from_env()?;
    let outcome = run_training(
        &cfg.train,
        &cfg.model,
        &a.variant,
        &manifest,
        &out,
        a.resume.as_deref(),
        &device,
    )?;
    println!(
        "trained {} (seed {}): {} evaluations, best checkpoint {}, last {}, log {}",
        a.variant,
        cfg.train.seed,
        outcome.records.len(),
        outcome.best.display(),
        outcome.last.display(),
        outcome.metrics_log.display()
    );
    if let Some(r) = outcome.records.last() {
        println!("final psnr {:.3} dB, accuracy {:.4}", r.psnr, r.accuracy);
    }
    Ok(())
}

fn load_model(dir: &Path) -> Result<StegoModel> {
    StegoModel::load(dir, DType::F32, &device_from_env()?)
}

pub fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let cover = load_image_native(&a.cover)?;
    let bytes = std::fs::read(&a.payload).map_err(|e| Error::io(&a.payload, e))?;
    let mut payload = BitPayload::from_bytes(&bytes);
    if let Some(n) = a.bits {
        if n > payload.len() {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: payload.len(),
            });
        }
        payload = payload.truncated(n);
    }
    let (d, h, w) = (model.payload_depth(), cover.height(), cover.width());
    let capacity = d * h * w;
    if payload.len() > capacity {
        return Err(Error::CapacityExceeded {
            requested: payload.len(),
            capacity,
        });
    }
    let used = payload.len();
    let secret = encode_payload(&payload.zero_padded(capacity), d, h, w)?;
    let container = model.embed(&cover, &secret)?;
    container.save_png(&a.out)?;
    println!(
        "embedded {used} of {capacity} bits ({d} bpp, {h}x{w}) into {} (seed {})",
        a.out.display(),
        a.seed
    );
    Ok(())
}

pub fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let stego = load_image_native(&a.stego)?;
    let capacity = model.payload_depth() * stego.height() * stego.width();
    if a.bits > capacity {
        return Err(Error::CapacityExceeded {
            requested: a.bits,
            capacity,
        });
    }
    let bits = if a.bits == 0 {
        BitPayload::new(Vec::new())
    } else {
        let logits = model.extract_logits(&stego)?;
        flatten_payload(&threshold_bits(&logits)?).truncated(a.bits)
    };
    std::fs::write(&a.out, bits.to_bytes()).map_err(|e| Error::io(&a.out, e))?;
    println!("extracted {} bits into {} (seed {})", a.bits, a.out.display(), a.seed);
    Ok(())
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = ConfigFile::load_or_default(a.config.as_deref())?;
    let model = load_model(&a.model)?;
    let size = a.image_size.unwrap_or(cfg.eval.image_size);
    let images = load_manifest_images(&a.manifest, size)?;
    let dataset = a
        .dataset
        .or(cfg.eval.dataset.clone())
        .unwrap_or_else(|| stem(&a.manifest));
    let opts = EvalOptions {
        seed: a.seed.unwrap_or(cfg.eval.seed),
        msssim_scales: cfg.eval.msssim_scales,
        bypass_encoder: a.bypass,
        expected_depth: a.depth,
        ..EvalOptions::default()
    };
    let rec = evaluate(&model, &images, &dataset, &opts)?;
    let path = write_record(&a.report, &rec)?;
    println!(
        "psnr {:.3} dB, ssim {:.5}, accuracy {:.4} over {} images (seed {}) -> {}",
        rec.psnr,
        rec.ssim,
        rec.accuracy,
        rec.images,
        rec.seed,
        path.display()
    );
    Ok(())
}

pub fn parse_variants(list: &str) -> Result<Vec<String>> {
    let names: Vec<String> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    for n in &names {
        if !VARIANTS.contains(&n.as_str()) {
            return Err(Error::UnknownVariant(n.clone()));
        }
    }
    Ok(names)
}

pub fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = ConfigFile::load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let variants = parse_variants(&a.variants)?;
    let images = load_manifest_images(&a.manifest, cfg.train.image_size)?;
    let dataset = stem(&a.manifest);
    let report = ablation_suite(&variants, &cfg.model, &cfg.train, &images, &dataset, &device_from_env()?)?;
    let (csv, json) = report.write(&a.report)?;
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} variants ({} failed, seed {}) -> {}, {}",
        report.rows.len(),
        failed,
        report.seed,
        csv.display(),
        json.display()
    );
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}
