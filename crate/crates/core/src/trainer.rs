//! Alternating adversarial training: the codec (encoder + decoder) steps on
//! every batch, the critic every `critic_period` batches.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricsRecord};
use crate::losses::{
    decode_loss, embedding_loss, steganalysis_loss, steganalysis_loss_labels, ImageClass,
    LossWeights, MsSsimParams, SsimParams,
};
use crate::networks::{DenseStyle, ModelConfig, MultiScaleStyle, StegoModel};
use crate::nn::{Ctx, NormMode};
use crate::payload::{load_image, CoverImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub codec_lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub critic_lr: f64,
    pub critic_weight_decay: f64,
    /// Critic update period in codec batches.
    pub critic_period: u64,
    pub batch_size: usize,
    /// Passes over the manifest.
    pub max_epochs: usize,
    /// Optional hard cap on codec steps.
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Training images are resized to `image_size x image_size`.
    pub image_size: usize,
    /// Upper bound on MS-SSIM scales; lowered automatically for small images.
    pub msssim_scales: usize,
    pub loss: LossWeights,
    /// Global gradient-norm clip for the codec; off when absent.
    pub grad_clip: Option<f64>,
    /// Evaluate and log every this many epochs (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            codec_lr: 1e-3,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            critic_lr: 1e-4 / 3.0,
            critic_weight_decay: 1e-8,
            critic_period: 5,
            batch_size: 8,
            max_epochs: 120,
            max_steps: None,
            seed: 0,
            image_size: 128,
            msssim_scales: 4,
            loss: LossWeights::default(),
            grad_clip: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.codec_lr >= 0.0 && self.codec_lr.is_finite()) {
            return bad(format!("train.codec_lr must be finite and >= 0, got {}", self.codec_lr));
        }
        if !(self.critic_lr >= 0.0 && self.critic_lr.is_finite()) {
            return bad(format!("train.critic_lr must be finite and >= 0, got {}", self.critic_lr));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("train.betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.critic_period == 0 {
            return bad("train.critic_period must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if self.image_size < 32 || self.image_size % 8 != 0 {
            return bad(format!(
                "train.image_size must be a multiple of 8 and >= 32, got {}",
                self.image_size
            ));
        }
        if self.msssim_scales == 0 {
            return bad("train.msssim_scales must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("train.grad_clip must be > 0, got {c}"));
            }
        }
        self.loss.validate()
    }
}

/// Adam over a fixed list of variables.
pub struct Adam {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    betas: (f64, f64),
    eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, lr: f64, betas: (f64, f64), eps: f64) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            step: 0,
            lr,
            betas,
            eps,
        })
    }

    pub fn apply(&mut self, grads: &GradStore, clip: Option<f64>) -> Result<()> {
        let scale = match clip {
            Some(max) => {
                let norm = grad_norm(grads, &self.vars)?;
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // grads carry op history; keep optimizer state graph-free
            let g = g.detach();
            let g = if scale != 1.0 { (g * scale)? } else { g };
            self.m[i] = ((&self.m[i] * b1)? + (&g * (1.0 - b1))?)?;
            self.v[i] = ((&self.v[i] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            if self.lr == 0.0 {
                continue;
            }
            let mhat = (&self.m[i] / c1)?;
            let vhat = (&self.v[i] / c2)?;
            let delta = ((mhat / (vhat.sqrt()? + self.eps)?)? * self.lr)?;
            var.set(&(var.as_tensor().detach() - delta)?)?;
        }
        Ok(())
    }

    fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.insert(format!("m.{name}"), self.m[i].clone());
            out.insert(format!("v.{name}"), self.v[i].clone());
        }
        out
    }

    fn load_state(&mut self, t: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (slot, key) in [(&mut self.m[i], format!("m.{name}")), (&mut self.v[i], format!("v.{name}"))] {
                let src = t
                    .get(&key)
                    .ok_or_else(|| Error::ConfigMismatch(format!("optimizer state lacks `{key}`")))?;
                if src.dims() != var.dims() {
                    return Err(Error::ConfigMismatch(format!(
                        "optimizer state `{key}` has shape {:?}, expected {:?}",
                        src.dims(),
                        var.dims()
                    )));
                }
                *slot = src.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Plain SGD with L2 weight decay.
pub struct Sgd {
    vars: Vec<(String, Var)>,
    pub lr: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<(String, Var)>, lr: f64, weight_decay: f64) -> Self {
        Self {
            vars,
            lr,
            weight_decay,
        }
    }

    pub fn apply(&mut self, grads: &GradStore) -> Result<()> {
        if self.lr == 0.0 {
            return Ok(());
        }
        for (_, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() + (var.as_tensor().detach() * self.weight_decay)?)?;
            var.set(&(var.as_tensor().detach() - (g * self.lr)?)?)?;
        }
        Ok(())
    }
}

fn grad_norm(grads: &GradStore, vars: &[(String, Var)]) -> Result<f64> {
    let mut sq = 0.0;
    for (_, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// The registered architecture variants.
pub const VARIANTS: [&str; 8] = [
    "clpstnet",
    "conv_baseline",
    "progressive_decoder_only",
    "inception_only",
    "inception_dense",
    "dilation_3",
    "dilation_6",
    "dilation_3_6",
];

/// Applies a variant's structural changes to a base model config.
pub fn variant_config(variant: &str, base: &ModelConfig) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    match variant {
        "clpstnet" => {}
        "conv_baseline" => {
            cfg.encoder_multiscale = MultiScaleStyle::Plain;
            cfg.encoder_dense = DenseStyle::Plain;
            cfg.decoder_multiscale = MultiScaleStyle::Plain;
        }
        "progressive_decoder_only" => {
            cfg.encoder_multiscale = MultiScaleStyle::Plain;
            cfg.encoder_dense = DenseStyle::Plain;
            cfg.decoder_multiscale = MultiScaleStyle::Pmcb;
        }
        "inception_only" => {
            cfg.encoder_multiscale = MultiScaleStyle::Inception;
            cfg.encoder_dense = DenseStyle::None;
            cfg.decoder_multiscale = MultiScaleStyle::Inception;
        }
        "inception_dense" => {
            cfg.encoder_multiscale = MultiScaleStyle::Inception;
            cfg.encoder_dense = DenseStyle::Dense;
            cfg.decoder_multiscale = MultiScaleStyle::Inception;
        }
        "dilation_3" => cfg.set_all_dilations((3, 3)),
        "dilation_6" => cfg.set_all_dilations((6, 6)),
        "dilation_3_6" => cfg.set_all_dilations((3, 6)),
        other => return Err(Error::UnknownVariant(other.to_string())),
    }
    Ok(cfg)
}

/// Builds the encoder, decoder and critic for a registered variant.
pub fn build_model(variant: &str, base: &ModelConfig, seed: u64, device: &Device) -> Result<StegoModel> {
    let cfg = variant_config(variant, base)?;
    StegoModel::new(cfg, variant, seed, DType::F32, device)
}

/// Loss components of one codec step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub batch: u64,
    pub encode: f64,
    pub decode: f64,
    pub steganalysis: f64,
    pub total: f64,
    /// Training decode accuracy on this batch (train-mode forward).
    pub accuracy: f64,
    /// Critic loss when this step also updated the critic.
    pub critic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse::<u128>()
            .map_err(|e| Error::ConfigMismatch(format!("bad rng position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything besides weights needed to resume bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: usize,
    pub global_batch: u64,
    pub critic_updates: u64,
    pub adam_step: u64,
    pub best_psnr: Option<f64>,
    pub rng: RngState,
    pub trace: Vec<StepLosses>,
}

pub const OPTIM_FILE: &str = "optim.safetensors";
pub const STATE_FILE: &str = "state.json";
pub const TRAIN_CONFIG_FILE: &str = "train.toml";

/// Model, optimizers and loop state.
pub struct Trainer {
    pub model: StegoModel,
    pub cfg: TrainConfig,
    codec_opt: Adam,
    critic_opt: Sgd,
    rng: ChaCha8Rng,
    pub epoch: usize,
    pub global_batch: u64,
    pub critic_updates: u64,
    pub best_psnr: Option<f64>,
    pub trace: Vec<StepLosses>,
    ssim: SsimParams,
}

impl Trainer {
    pub fn new(model: StegoModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let codec_opt = Adam::new(model.codec_vars(), cfg.codec_lr, cfg.betas, cfg.adam_eps)?;
        let critic_opt = Sgd::new(model.critic_vars(), cfg.critic_lr, cfg.critic_weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            cfg,
            codec_opt,
            critic_opt,
            rng,
            epoch: 0,
            global_batch: 0,
            critic_updates: 0,
            best_psnr: None,
            trace: Vec::new(),
            ssim: SsimParams::default(),
        })
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn set_codec_lr(&mut self, lr: f64) {
        self.codec_opt.lr = lr;
    }

    pub fn set_critic_lr(&mut self, lr: f64) {
        self.critic_opt.lr = lr;
    }

    fn msssim_params(&self, h: usize, w: usize) -> MsSsimParams {
        MsSsimParams::for_size(h, w, self.cfg.msssim_scales)
    }

    /// Fresh Bernoulli(0.5) secrets, `N x D x H x W`.
    fn sample_secrets(&mut self, n: usize, h: usize, w: usize) -> Result<Tensor> {
        use rand::Rng;
        let d = self.model.payload_depth();
        let bits: Vec<f32> = (0..n * d * h * w)
            .map(|_| if self.rng.random::<bool>() { 1.0 } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(bits, (n, d, h, w), self.model.device())?.to_dtype(self.model.dtype())?)
    }

    /// One codec update on `covers` (`N x 3 x H x W`), followed by a critic
    /// update on the same covers when the batch counter hits the period.
    pub fn train_step(&mut self, covers: &Tensor) -> Result<StepLosses> {
        let (n, _, h, w) = covers.dims4()?;
        let secrets = self.sample_secrets(n, h, w)?;
        let input = Tensor::cat(&[covers, &secrets], 1)?;

        let rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let ctx = Ctx::train(rng);
        let fwd = (|| -> Result<(Tensor, Tensor)> {
            let container = self.model.encoder.forward(&input, &ctx)?;
            let logits = self.model.decoder.forward(&container, &ctx)?;
            Ok((container, logits))
        })();
        self.rng = ctx.into_rng().expect("train context owns an rng");
        let (container, logits) = fwd?;
        let critic_logits = self
            .model
            .critic
            .forward(&container, &Ctx::with_norm(NormMode::TrainFrozen, None))?;

        let weights = self.cfg.loss;
        let e = embedding_loss(covers, &container, &weights, &self.ssim, &self.msssim_params(h, w))?;
        let d = decode_loss(&logits, &secrets)?;
        // the encoder wants its containers classified as covers
        let s = steganalysis_loss(&critic_logits, ImageClass::Cover)?;
        let total = ((&e + (&d * weights.decode)?)? + (&s * weights.steganalysis)?)?;

        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let (ev, dv, sv) = (scalar(&e)?, scalar(&d)?, scalar(&s)?);
        let tv = scalar(&total)?;
        if !(ev.is_finite() && dv.is_finite() && sv.is_finite() && tv.is_finite()) {
            let component = if !ev.is_finite() {
                "encode"
            } else if !dv.is_finite() {
                "decode"
            } else {
                "steganalysis"
            };
            return Err(Error::NonFiniteLoss {
                component,
                encode: ev,
                decode: dv,
                steganalysis: sv,
            });
        }
        let accuracy = batch_accuracy(&logits, &secrets)?;

        let grads = total.backward()?;
        self.codec_opt.apply(&grads, self.cfg.grad_clip)?;
        self.global_batch += 1;

        let critic = if self.global_batch % self.cfg.critic_period == 0 {
            Some(self.critic_step(covers, &container.detach())?)
        } else {
            None
        };
        let losses = StepLosses {
            batch: self.global_batch,
            encode: ev,
            decode: dv,
            steganalysis: sv,
            total: tv,
            accuracy,
            critic,
        };
        self.trace.push(losses);
        Ok(losses)
    }

    /// SGD step on the critic: covers labelled cover, containers stego.
    /// Returns the pre-update critic loss.
    pub fn critic_step(&mut self, covers: &Tensor, containers: &Tensor) -> Result<f64> {
        let n = covers.dim(0)?;
        let x = Tensor::cat(&[covers, &containers.detach()], 0)?;
        let logits = self.model.critic.forward(&x, &Ctx::with_norm(NormMode::Train, None))?;
        let labels: Vec<ImageClass> = std::iter::repeat_n(ImageClass::Cover, n)
            .chain(std::iter::repeat_n(ImageClass::Stego, n))
            .collect();
        let loss = steganalysis_loss_labels(&logits, &labels)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        self.critic_opt.apply(&grads)?;
        self.critic_updates += 1;
        Ok(value)
    }

    /// Critic loss without updating anything (running statistics included).
    pub fn critic_loss(&self, covers: &Tensor, containers: &Tensor) -> Result<f64> {
        let n = covers.dim(0)?;
        let x = Tensor::cat(&[covers, containers], 0)?;
        let logits = self
            .model
            .critic
            .forward(&x, &Ctx::with_norm(NormMode::TrainFrozen, None))?;
        let labels: Vec<ImageClass> = std::iter::repeat_n(ImageClass::Cover, n)
            .chain(std::iter::repeat_n(ImageClass::Stego, n))
            .collect();
        Ok(steganalysis_loss_labels(&logits, &labels)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?)
    }

    /// Runs one pass over `images` in a freshly shuffled order. Stops early
    /// once `max_steps` is reached; returns the number of steps taken.
    pub fn train_epoch(&mut self, images: &[CoverImage]) -> Result<usize> {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut self.rng);
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            if self.budget_spent() {
                break;
            }
            let batch = stack_images(chunk.iter().map(|&i| &images[i]), &self.model)?;
            self.train_step(&batch)?;
            steps += 1;
        }
        self.epoch += 1;
        Ok(steps)
    }

    pub fn budget_spent(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.global_batch >= m)
    }

    pub fn state(&self) -> TrainingState {
        TrainingState {
            epoch: self.epoch,
            global_batch: self.global_batch,
            critic_updates: self.critic_updates,
            adam_step: self.codec_opt.step,
            best_psnr: self.best_psnr,
            rng: RngState::capture(&self.rng),
            trace: self.trace.clone(),
        }
    }

    /// Writes model weights, sidecar, optimizer moments and loop state.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let optim = dir.join(OPTIM_FILE);
        candle_core::safetensors::save(&self.codec_opt.state_tensors(), &optim)
            .map_err(|e| Error::format(&optim, e))?;
        let state = dir.join(STATE_FILE);
        let json = serde_json::to_string_pretty(&self.state()).map_err(|e| Error::format(&state, e))?;
        std::fs::write(&state, json).map_err(|e| Error::io(&state, e))?;
        let tc = dir.join(TRAIN_CONFIG_FILE);
        let text = toml::to_string_pretty(&self.cfg).map_err(|e| Error::format(&tc, e))?;
        std::fs::write(&tc, text).map_err(|e| Error::io(&tc, e))
    }

    /// Restores a checkpoint written by [`Trainer::save_checkpoint`]. The
    /// stored model config must equal `expected` when one is given.
    pub fn resume(
        dir: &Path,
        cfg: TrainConfig,
        expected: Option<&ModelConfig>,
        device: &Device,
    ) -> Result<Self> {
        let model = StegoModel::load(dir, DType::F32, device)?;
        if let Some(exp) = expected {
            if &model.config != exp {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint {} was trained with a different model config ({})",
                    dir.display(),
                    describe_diff(&model.config, exp)
                )));
            }
        }
        let mut t = Self::new(model, cfg)?;
        let state_path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: TrainingState =
            serde_json::from_str(&text).map_err(|e| Error::format(&state_path, e))?;
        let optim = dir.join(OPTIM_FILE);
        let tensors =
            candle_core::safetensors::load(&optim, device).map_err(|e| Error::format(&optim, e))?;
        t.codec_opt.load_state(&tensors, state.adam_step)?;
        t.rng = state.rng.restore()?;
        t.epoch = state.epoch;
        t.global_batch = state.global_batch;
        t.critic_updates = state.critic_updates;
        t.best_psnr = state.best_psnr;
        t.trace = state.trace;
        Ok(t)
    }
}

fn describe_diff(a: &ModelConfig, b: &ModelConfig) -> String {
    let (ta, tb) = (toml::Value::try_from(a), toml::Value::try_from(b));
    if let (Ok(toml::Value::Table(ta)), Ok(toml::Value::Table(tb))) = (ta, tb) {
        let keys: Vec<String> = ta
            .iter()
            .filter(|(k, v)| tb.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint {v}, requested {}", tb.get(k).map(|x| x.to_string()).unwrap_or_default()))
            .collect();
        if !keys.is_empty() {
            return keys.join("; ");
        }
    }
    "configs differ".into()
}

fn batch_accuracy(logits: &Tensor, secrets: &Tensor) -> Result<f64> {
    let pred = logits.ge(0.0)?.to_dtype(DType::F32)?;
    let target = secrets.to_dtype(DType::F32)?;
    let agree = pred.eq(&target)?.to_dtype(DType::F64)?.mean_all()?;
    Ok(agree.to_scalar::<f64>()?)
}

/// `N x 3 x H x W` batch in the model's dtype.
pub fn stack_images<'a>(
    images: impl IntoIterator<Item = &'a CoverImage>,
    model: &StegoModel,
) -> Result<Tensor> {
    let ts = images
        .into_iter()
        .map(|im| im.to_tensor(model.dtype(), model.device()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Reads a newline-delimited list of image paths; blank lines and `#`
/// comments are skipped, relative paths resolve against the manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(entries)
}

pub fn load_manifest_images(path: &Path, size: usize) -> Result<Vec<CoverImage>> {
    read_manifest(path)?
        .iter()
        .map(|p| load_image(p, (size, size)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub last: PathBuf,
    pub best: PathBuf,
    pub metrics_log: PathBuf,
    pub records: Vec<MetricsRecord>,
}

/// Trains on a manifest, writing `last/`, `best/` and `metrics.jsonl` under
/// `out`. With `resume`, continues from that checkpoint directory.
pub fn run_training(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    variant: &str,
    manifest: &Path,
    out: &Path,
    resume: Option<&Path>,
    device: &Device,
) -> Result<TrainingOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    let images = load_manifest_images(manifest, train_cfg.image_size)?;
    let dataset = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut trainer = match resume {
        Some(dir) => {
            let expected = variant_config(variant, model_cfg)?;
            Trainer::resume(dir, train_cfg.clone(), Some(&expected), device)?
        }
        None => Trainer::new(build_model(variant, model_cfg, train_cfg.seed, device)?, train_cfg.clone())?,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let last = out.join("last");
    let best = out.join("best");
    let metrics_log = out.join("metrics.jsonl");
    if resume.is_none() || !metrics_log.exists() {
        std::fs::File::create(&metrics_log).map_err(|e| Error::io(&metrics_log, e))?;
    }
    if trainer.epoch == 0 && trainer.global_batch == 0 {
        trainer.save_checkpoint(&last)?;
        trainer.save_checkpoint(&best)?;
    }
    let opts = EvalOptions {
        seed: train_cfg.seed,
        msssim_scales: train_cfg.msssim_scales,
        ..EvalOptions::default()
    };
    let mut records = Vec::new();
    while trainer.epoch < train_cfg.max_epochs && !trainer.budget_spent() {
        trainer.train_epoch(&images)?;
        let due = train_cfg.eval_every > 0 && trainer.epoch % train_cfg.eval_every == 0;
        let finished = trainer.epoch >= train_cfg.max_epochs || trainer.budget_spent();
        if due || finished {
            let mut rec = evaluate(&trainer.model, &images, &dataset, &opts)?;
            rec.epoch = Some(trainer.epoch);
            append_jsonl(&metrics_log, &rec)?;
            if trainer.best_psnr.is_none_or(|b| rec.psnr > b) {
                trainer.best_psnr = Some(rec.psnr);
                trainer.save_checkpoint(&best)?;
            }
            log::info!(
                "epoch {} step {}: psnr {:.2} dB, ssim {:.4}, accuracy {:.4}",
                trainer.epoch,
                trainer.global_batch,
                rec.psnr,
                rec.ssim,
                rec.accuracy
            );
            records.push(rec);
        }
        trainer.save_checkpoint(&last)?;
    }
    Ok(TrainingOutcome {
        last,
        best,
        metrics_log,
        records,
    })
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value).map_err(|e| Error::format(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
