//! Metric reports over image sets, critic detection reports and the
//! ablation comparison table.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::{msssim_per_image, mse_per_image, psnr_from_mse, ssim_per_image, MsSsimParams, SsimParams};
use crate::networks::{ModelConfig, StegoModel};
use crate::nn::Ctx;
use crate::payload::{threshold_bits, CoverImage, SecretTensor};
use crate::trainer::{build_model, TrainConfig, Trainer};

/// Dataset-mean quality and decode metrics of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub variant: String,
    pub payload_depth: usize,
    pub ssim: f64,
    pub msssim: f64,
    /// Mean per-image PSNR in dB; `"inf"` when every container equals its cover.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub rmse: f64,
    /// Bit accuracy on the float containers.
    pub accuracy: f64,
    /// Bit accuracy after 8-bit quantization of the containers.
    pub accuracy_quantized: f64,
    /// Mean stego probability the critic assigns to the containers.
    pub critic_score: f64,
    pub seed: u64,
    pub msssim_scales: usize,
    pub images: usize,
    pub bits: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value `{t}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub seed: u64,
    pub msssim_scales: usize,
    /// Skip the encoder: every container is its cover.
    pub bypass_encoder: bool,
    pub batch_size: usize,
    /// Payload depth the caller expects the checkpoint to carry.
    pub expected_depth: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            msssim_scales: 4,
            bypass_encoder: false,
            batch_size: 8,
            expected_depth: None,
        }
    }
}

/// The secret evaluated with image `index`; a function of `(seed, index)`.
pub fn eval_secret(seed: u64, index: usize, depth: usize, h: usize, w: usize) -> SecretTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    SecretTensor::random(depth, h, w, &mut rng)
}

fn quantize(img: &CoverImage) -> CoverImage {
    CoverImage::from_rgb8(&img.to_rgb8())
}

fn stack(images: &[&CoverImage], dtype: DType, dev: &Device) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|im| im.to_tensor(dtype, dev))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn bit_agreement(logits: &Tensor, secrets: &[SecretTensor]) -> Result<usize> {
    let mut same = 0;
    for (i, s) in secrets.iter().enumerate() {
        let rec = threshold_bits(&logits.get(i)?)?;
        same += s.data().iter().zip(rec.data()).filter(|(a, b)| a == b).count();
    }
    Ok(same)
}

/// Containers (float, unquantized) for `covers` with their seeded secrets.
pub fn embed_all(model: &StegoModel, covers: &[CoverImage], opts: &EvalOptions) -> Result<(Vec<CoverImage>, Vec<SecretTensor>)> {
    let d = model.payload_depth();
    let mut containers = Vec::with_capacity(covers.len());
    let mut secrets = Vec::with_capacity(covers.len());
    for (start, chunk) in chunked(covers, opts.batch_size) {
        let sec: Vec<SecretTensor> = chunk
            .iter()
            .enumerate()
            .map(|(k, c)| eval_secret(opts.seed, start + k, d, c.height(), c.width()))
            .collect();
        if opts.bypass_encoder {
            containers.extend(chunk.iter().cloned());
        } else {
            let refs: Vec<&CoverImage> = chunk.iter().collect();
            let x = stack(&refs, model.dtype(), model.device())?;
            let s = Tensor::stack(
                &sec.iter()
                    .map(|s| s.to_tensor(model.dtype(), model.device()))
                    .collect::<Result<Vec<_>>>()?,
                0,
            )?;
            let out = model.encoder.forward(&Tensor::cat(&[&x, &s], 1)?, &Ctx::eval())?;
            for i in 0..chunk.len() {
                containers.push(CoverImage::from_tensor(&out.get(i)?)?);
            }
        }
        secrets.extend(sec);
    }
    Ok((containers, secrets))
}

fn chunked<T>(items: &[T], size: usize) -> impl Iterator<Item = (usize, &[T])> {
    items.chunks(size.max(1)).enumerate().map(move |(i, c)| (i * size.max(1), c))
}

/// Embeds a seeded secret in every cover and reports dataset means of the
/// cover/container quality metrics and the decode accuracy.
pub fn evaluate(model: &StegoModel, covers: &[CoverImage], dataset: &str, opts: &EvalOptions) -> Result<MetricsRecord> {
    if covers.is_empty() {
        return Err(Error::EmptyDataset(dataset.to_string()));
    }
    if let Some(d) = opts.expected_depth.filter(|&d| d != model.payload_depth()) {
        return Err(Error::ConfigMismatch(format!(
            "requested {d} bpp but the checkpoint embeds {} bit planes",
            model.payload_depth()
        )));
    }
    let (h, w) = (covers[0].height(), covers[0].width());
    if covers.iter().any(|c| (c.height(), c.width()) != (h, w)) {
        return Err(Error::ShapeMismatch("evaluation images must share one size".into()));
    }
    let ms = MsSsimParams::for_size(h, w, opts.msssim_scales);
    let sp = SsimParams::default();
    let (containers, secrets) = embed_all(model, covers, opts)?;

    let (mut ssim, mut msssim, mut psnr, mut rmse, mut score) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut agree, mut agree_q) = (0usize, 0usize);
    let cpu = Device::Cpu;
    for (start, chunk) in chunked(covers, opts.batch_size) {
        let n = chunk.len();
        let cov: Vec<&CoverImage> = chunk.iter().collect();
        let con: Vec<&CoverImage> = containers[start..start + n].iter().collect();
        let x = stack(&cov, DType::F64, &cpu)?;
        let y = stack(&con, DType::F64, &cpu)?;
        ssim += to_vec(&ssim_per_image(&x, &y, &sp)?)?.iter().sum::<f64>();
        msssim += to_vec(&msssim_per_image(&x, &y, &ms)?)?.iter().sum::<f64>();
        for m in to_vec(&mse_per_image(&x, &y)?)? {
            psnr += psnr_from_mse(m);
            rmse += m.sqrt();
        }

        let y_model = stack(&con, model.dtype(), model.device())?;
        let sec = &secrets[start..start + n];
        agree += bit_agreement(&model.decoder.forward(&y_model, &Ctx::eval())?, sec)?;
        let quant: Vec<CoverImage> = con.iter().map(|c| quantize(c)).collect();
        let yq = stack(&quant.iter().collect::<Vec<_>>(), model.dtype(), model.device())?;
        agree_q += bit_agreement(&model.decoder.forward(&yq, &Ctx::eval())?, sec)?;
        score += model.critic.scores(&y_model, &Ctx::eval())?.iter().sum::<f64>();
    }
    let n = covers.len() as f64;
    let bits = secrets.iter().map(|s| s.data().len()).sum::<usize>();
    Ok(MetricsRecord {
        dataset: dataset.to_string(),
        variant: model.variant.clone(),
        payload_depth: model.payload_depth(),
        ssim: ssim / n,
        msssim: msssim / n,
        psnr: psnr / n,
        rmse: rmse / n,
        accuracy: agree as f64 / bits as f64,
        accuracy_quantized: agree_q as f64 / bits as f64,
        critic_score: score / n,
        seed: opts.seed,
        msssim_scales: ms.scales,
        images: covers.len(),
        bits,
        epoch: None,
    })
}

/// `{variant}_{dataset}_{D}bpp.json`
pub fn report_name(variant: &str, dataset: &str, depth: usize) -> String {
    format!("{variant}_{dataset}_{depth}bpp.json")
}

pub fn write_record(dir: &Path, rec: &MetricsRecord) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(report_name(&rec.variant, &rec.dataset, rec.payload_depth));
    let json = serde_json::to_string_pretty(rec).map_err(|e| Error::format(&path, e))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteganalysisReport {
    pub images_per_class: usize,
    pub cover_mean_score: f64,
    pub stego_mean_score: f64,
    /// Fraction classified correctly with `score >= 0.5` meaning stego.
    pub detection_accuracy: f64,
}

/// Scores equal-sized cover and container sets with the model's critic.
pub fn steganalysis_report(model: &StegoModel, covers: &[CoverImage], containers: &[CoverImage]) -> Result<SteganalysisReport> {
    if covers.len() != containers.len() {
        return Err(Error::CardinalityMismatch {
            covers: covers.len(),
            containers: containers.len(),
        });
    }
    if covers.is_empty() {
        return Err(Error::EmptyDataset("steganalysis report".into()));
    }
    let score_all = |set: &[CoverImage]| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(set.len());
        for chunk in set.chunks(8) {
            let refs: Vec<&CoverImage> = chunk.iter().collect();
            let x = stack(&refs, model.dtype(), model.device())?;
            out.extend(model.critic.scores(&x, &Ctx::eval())?);
        }
        Ok(out)
    };
    let cs = score_all(covers)?;
    let ss = score_all(containers)?;
    let n = cs.len() as f64;
    let correct = cs.iter().filter(|&&s| s < 0.5).count() + ss.iter().filter(|&&s| s >= 0.5).count();
    Ok(SteganalysisReport {
        images_per_class: cs.len(),
        cover_mean_score: cs.iter().sum::<f64>() / n,
        stego_mean_score: ss.iter().sum::<f64>() / n,
        detection_accuracy: correct as f64 / (2.0 * n),
    })
}

/// PNG/JPEG files of a directory in name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub record: Option<MetricsRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub seed: u64,
    pub steps: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub const TABLE_COLUMNS: [&str; 5] = ["SSIM", "MSSSIM", "PSNR", "RMSE", "Accuracy"];

impl AblationReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["variant"];
        header.extend(TABLE_COLUMNS);
        let io = |e: csv::Error| Error::Format {
            path: PathBuf::from("<csv>"),
            message: e.to_string(),
        };
        w.write_record(&header).map_err(io)?;
        for row in &self.rows {
            let cells: Vec<String> = match &row.record {
                Some(r) => [r.ssim, r.msssim, r.psnr, r.rmse, r.accuracy]
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect(),
                None => vec!["failed".to_string(); TABLE_COLUMNS.len()],
            };
            let mut rec = vec![row.variant.clone()];
            rec.extend(cells);
            w.write_record(&rec).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            path: PathBuf::from("<csv>"),
            message: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `ablation.csv` and `ablation.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("ablation.csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join("ablation.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(&json_path, e))?;
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}

/// Trains every variant from the same seed under the same budget and
/// evaluates each on the training images. A failing variant is recorded
/// and the suite moves on.
pub fn ablation_suite(
    variants: &[String],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    images: &[CoverImage],
    dataset: &str,
    device: &Device,
) -> Result<AblationReport> {
    train_cfg.validate()?;
    let opts = EvalOptions {
        seed: train_cfg.seed,
        msssim_scales: train_cfg.msssim_scales,
        ..EvalOptions::default()
    };
    let mut rows = Vec::with_capacity(variants.len());
    let mut steps = Vec::with_capacity(variants.len());
    for v in variants {
        let run = || -> Result<(MetricsRecord, u64)> {
            let model = build_model(v, model_cfg, train_cfg.seed, device)?;
            let mut t = Trainer::new(model, train_cfg.clone())?;
            if images.is_empty() {
                return Err(Error::EmptyDataset(dataset.to_string()));
            }
            while t.epoch < train_cfg.max_epochs && !t.budget_spent() {
                t.train_epoch(images)?;
            }
            Ok((evaluate(&t.model, images, dataset, &opts)?, t.global_batch))
        };
        match run() {
            Ok((rec, n)) => {
                log::info!("{v}: {n} steps, psnr {:.2} dB, accuracy {:.4}", rec.psnr, rec.accuracy);
                steps.push(n);
                rows.push(AblationRow {
                    variant: v.clone(),
                    record: Some(rec),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("{v} failed: {e}");
                steps.push(0);
                rows.push(AblationRow {
                    variant: v.clone(),
                    record: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(AblationReport {
        dataset: dataset.to_string(),
        seed: train_cfg.seed,
        steps,
        rows,
    })
}
