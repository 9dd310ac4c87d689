//! Encoder, decoder and steganalysis critic, plus the self-describing
//! checkpoint format (weights + TOML config sidecar).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::blocks::{
    Block, ConvBnAct, DenseBlock, DenseBlockConfig, Downsample, PlainStack, Pmcb, PmcbConfig,
    ResidualBlock, Transition, Upsample,
};
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::nn::{Activation, Conv2d, ConvCfg, Ctx, Linear, VarPath, VarStore};
use crate::payload::{concat_inputs, CoverImage, SecretTensor};

pub type Dilation = (usize, usize);

/// What fills a multi-scale slot of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiScaleStyle {
    /// Five-branch block with two dilated branches.
    Pmcb,
    /// Three-branch inception block (1x1, 3x3, 5x5).
    Inception,
    /// Plain 3x3 residual stack.
    Plain,
}

/// What fills a dense slot of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseStyle {
    Dense,
    Plain,
    /// Slot omitted.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Secret bit planes per pixel (bpp).
    pub payload_depth: usize,
    pub base_channels: usize,
    pub growth: usize,
    pub dense_layers: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Multi-scale block widths along the encoder down path; the decoder
    /// uses the same three widths.
    pub pmcb_channels: [usize; 3],
    /// Encoder up-path widths, coarsest first.
    pub up_channels: [usize; 3],
    /// Widths of the 1x1 skip projections, coarsest first.
    pub skip_channels: [usize; 3],
    pub encoder_down_dilations: [Dilation; 3],
    pub encoder_bottleneck_dilations: [Dilation; 2],
    pub encoder_up_dilations: [Dilation; 3],
    pub decoder_dilations: [Dilation; 3],
    pub encoder_multiscale: MultiScaleStyle,
    pub encoder_dense: DenseStyle,
    pub decoder_multiscale: MultiScaleStyle,
    /// Concatenate the full-resolution stem features into the output block.
    pub full_res_skip: bool,
    /// Add the head output to the cover's logit before the sigmoid, so the
    /// encoder learns a perturbation rather than the whole image.
    pub residual_output: bool,
    pub critic_channels: [usize; 5],
    pub critic_kernels: [usize; 5],
    pub critic_hidden: usize,
    pub critic_kv_filter: bool,
    pub spp_levels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_base(32, 16)
    }
}

impl ModelConfig {
    /// Channel plan derived from the stem width and dense growth rate:
    /// multi-scale widths `base * [6, 9, 16]`, up path `base * [8, 4, 2]`,
    /// skip projections at half the up width.
    pub fn with_base(base: usize, growth: usize) -> Self {
        let up = [8 * base, 4 * base, 2 * base];
        Self {
            payload_depth: 1,
            base_channels: base,
            growth,
            dense_layers: 4,
            dropout: 0.2,
            leaky_slope: 0.01,
            pmcb_channels: [6 * base, 9 * base, 16 * base],
            up_channels: up,
            skip_channels: up.map(|u| u / 2),
            encoder_down_dilations: [(3, 6), (6, 12), (12, 18)],
            encoder_bottleneck_dilations: [(3, 6), (6, 12)],
            encoder_up_dilations: [(12, 18), (6, 12), (3, 6)],
            decoder_dilations: [(3, 6), (6, 12), (12, 18)],
            encoder_multiscale: MultiScaleStyle::Pmcb,
            encoder_dense: DenseStyle::Dense,
            decoder_multiscale: MultiScaleStyle::Pmcb,
            full_res_skip: true,
            residual_output: false,
            critic_channels: [8, 16, 32, 64, 128],
            critic_kernels: [5, 5, 3, 3, 3],
            critic_hidden: 128,
            critic_kv_filter: false,
            spp_levels: vec![1, 2, 3, 4],
        }
    }

    pub fn payload_depth(mut self, d: usize) -> Self {
        self.payload_depth = d;
        self
    }

    /// Every dilation pair of every multi-scale block.
    pub fn all_dilations(&self) -> Vec<Dilation> {
        self.encoder_down_dilations
            .iter()
            .chain(&self.encoder_bottleneck_dilations)
            .chain(&self.encoder_up_dilations)
            .chain(&self.decoder_dilations)
            .copied()
            .collect()
    }

    pub fn set_all_dilations(&mut self, pair: Dilation) {
        self.encoder_down_dilations = [pair; 3];
        self.encoder_bottleneck_dilations = [pair; 2];
        self.encoder_up_dilations = [pair; 3];
        self.decoder_dilations = [pair; 3];
    }

    pub fn spp_length(&self) -> usize {
        self.critic_channels[4] * self.spp_levels.iter().map(|l| l * l).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.payload_depth == 0 {
            return err("payload_depth must be at least 1".into());
        }
        if self.base_channels == 0 || self.growth == 0 || self.critic_hidden == 0 {
            return err("channel counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let widths = self
            .pmcb_channels
            .iter()
            .chain(&self.up_channels)
            .chain(&self.skip_channels)
            .chain(&self.critic_channels);
        if widths.clone().any(|&w| w == 0) {
            return err("channel widths must be positive".into());
        }
        for &(d1, d2) in &self.all_dilations() {
            if d1 == 0 || d1 > d2 {
                return err(format!("dilation pair ({d1}, {d2}) must satisfy 1 <= d1 <= d2"));
            }
        }
        let down = &self.encoder_down_dilations;
        if down.windows(2).any(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1) {
            return err(format!("encoder down-path dilations must be nondecreasing: {down:?}"));
        }
        if self.critic_kernels.iter().any(|k| k % 2 == 0) {
            return err("critic kernels must be odd".into());
        }
        if self.spp_levels.is_empty() || self.spp_levels.contains(&0) {
            return err("spp_levels must be non-empty and positive".into());
        }
        Ok(())
    }
}

fn multiscale(
    vp: &VarPath,
    style: MultiScaleStyle,
    cin: usize,
    cout: usize,
    dil: Dilation,
    slope: f64,
) -> Result<Box<dyn Block>> {
    Ok(match style {
        MultiScaleStyle::Pmcb => Box::new(Pmcb::new(
            vp,
            PmcbConfig::with_total(cin, cout, Some(dil)).leaky_slope(slope),
        )?),
        MultiScaleStyle::Inception => Box::new(Pmcb::new(
            vp,
            PmcbConfig::with_total(cin, cout, None).leaky_slope(slope),
        )?),
        MultiScaleStyle::Plain => Box::new(PlainStack::new(vp, cin, cout, 2, slope)?),
    })
}

fn dense(vp: &VarPath, cfg: &ModelConfig, cin: usize) -> Result<Option<Box<dyn Block>>> {
    let out = cin + cfg.dense_layers * cfg.growth;
    Ok(match cfg.encoder_dense {
        DenseStyle::Dense => Some(Box::new(DenseBlock::new(
            vp,
            DenseBlockConfig {
                in_channels: cin,
                growth: cfg.growth,
                layers: cfg.dense_layers,
                dropout_rate: cfg.dropout,
                leaky_slope: cfg.leaky_slope,
            },
        )?)),
        DenseStyle::Plain => Some(Box::new(PlainStack::new(
            vp,
            cin,
            out,
            cfg.dense_layers,
            cfg.leaky_slope,
        )?)),
        DenseStyle::None => None,
    })
}

fn apply_optional(block: &Option<Box<dyn Block>>, x: Tensor, ctx: &Ctx) -> Result<Tensor> {
    match block {
        Some(b) => b.forward(&x, ctx),
        None => Ok(x),
    }
}

struct DownStage {
    dense: Option<Box<dyn Block>>,
    down: Downsample,
    multiscale: Box<dyn Block>,
}

struct UpStage {
    skip: ConvBnAct,
    dense: Option<Box<dyn Block>>,
    transition: Transition,
    multiscale: Box<dyn Block>,
    up: Upsample,
}

/// Maps `(3 + D) x H x W` cover-and-secret inputs to `3 x H x W`
/// containers in `[0, 1]`.
pub struct Encoder {
    in_channels: usize,
    residual_output: bool,
    stem: ConvBnAct,
    init: Vec<ResidualBlock>,
    down: Vec<DownStage>,
    bottleneck: Vec<Box<dyn Block>>,
    up: Vec<UpStage>,
    fuse: Option<ConvBnAct>,
    out_res: Vec<ResidualBlock>,
    head: Conv2d,
}

impl Encoder {
    pub fn new(vp: &VarPath, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let slope = cfg.leaky_slope;
        let act = Activation::LeakyRelu(slope);
        let base = cfg.base_channels;
        let in_channels = 3 + cfg.payload_depth;
        let stem = ConvBnAct::new(&vp.pp("stem"), in_channels, base, 3, ConvCfg::same(3, 1), act)?;
        let init = (0..4)
            .map(|k| ResidualBlock::new(&vp.pp(format!("init{k}")), base, slope))
            .collect::<Result<Vec<_>>>()?;

        let mut down = Vec::with_capacity(3);
        let mut c = base;
        for i in 0..3 {
            let sp = vp.pp(format!("down{i}"));
            let dense = dense(&sp.pp("dense"), cfg, c)?;
            let widened = c + cfg.dense_layers * cfg.growth;
            let down_in = if dense.is_some() { widened } else { c };
            let ds = Downsample::new(&sp.pp("downsample"), down_in, widened, slope)?;
            let ms = multiscale(
                &sp.pp("multiscale"),
                cfg.encoder_multiscale,
                widened,
                cfg.pmcb_channels[i],
                cfg.encoder_down_dilations[i],
                slope,
            )?;
            c = cfg.pmcb_channels[i];
            down.push(DownStage {
                dense,
                down: ds,
                multiscale: ms,
            });
        }

        let bottleneck = cfg
            .encoder_bottleneck_dilations
            .iter()
            .enumerate()
            .map(|(k, &dil)| {
                multiscale(&vp.pp(format!("bottleneck{k}")), cfg.encoder_multiscale, c, c, dil, slope)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut up = Vec::with_capacity(3);
        for j in 0..3 {
            let sp = vp.pp(format!("up{j}"));
            let skip_in = cfg.pmcb_channels[2 - j];
            let skip_w = cfg.skip_channels[j];
            let skip = ConvBnAct::new(&sp.pp("skip"), skip_in, skip_w, 1, ConvCfg::default(), act)?;
            let fused = c + skip_w;
            let dense = dense(&sp.pp("dense"), cfg, fused)?;
            let trans_in = if dense.is_some() {
                fused + cfg.dense_layers * cfg.growth
            } else {
                fused
            };
            let width = cfg.up_channels[j];
            let transition = Transition::new(&sp.pp("transition"), trans_in, width, slope)?;
            let ms = multiscale(
                &sp.pp("multiscale"),
                cfg.encoder_multiscale,
                width,
                width,
                cfg.encoder_up_dilations[j],
                slope,
            )?;
            let upsample = Upsample::new(&sp.pp("upsample"), width, width, slope)?;
            c = width;
            up.push(UpStage {
                skip,
                dense,
                transition,
                multiscale: ms,
                up: upsample,
            });
        }

        let fuse = if cfg.full_res_skip {
            Some(ConvBnAct::new(&vp.pp("fuse"), c + base, c, 1, ConvCfg::default(), act)?)
        } else {
            None
        };
        let out_res = (0..2)
            .map(|k| ResidualBlock::new(&vp.pp(format!("out{k}")), c, slope))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(&vp.pp("head"), c, 3, 1, ConvCfg::default())?;
        Ok(Self {
            in_channels,
            residual_output: cfg.residual_output,
            stem,
            init,
            down,
            bottleneck,
            up,
            fuse,
            out_res,
            head,
        })
    }

    pub fn forward(&self, input: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (_, c, h, w) = input.dims4()?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {} input channels (3 + D), got {c}",
                self.in_channels
            )));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::DimensionNotDivisible {
                height: h,
                width: w,
                divisor: 8,
            });
        }
        let mut x = self.stem.forward(input, ctx)?;
        for r in &self.init {
            x = r.forward(&x, ctx)?;
        }
        let full_res = x.clone();
        let mut skips = Vec::with_capacity(3);
        for stage in &self.down {
            x = apply_optional(&stage.dense, x, ctx)?;
            x = stage.down.forward(&x, ctx)?;
            x = stage.multiscale.forward(&x, ctx)?;
            skips.push(x.clone());
        }
        for b in &self.bottleneck {
            x = b.forward(&x, ctx)?;
        }
        for (stage, skip) in self.up.iter().zip(skips.iter().rev()) {
            let s = stage.skip.forward(skip, ctx)?;
            x = Tensor::cat(&[&x, &s], 1)?;
            x = apply_optional(&stage.dense, x, ctx)?;
            x = stage.transition.forward(&x, ctx)?;
            x = stage.multiscale.forward(&x, ctx)?;
            x = stage.up.forward(&x, ctx)?;
        }
        if let Some(fuse) = &self.fuse {
            x = fuse.forward(&Tensor::cat(&[&x, &full_res], 1)?, ctx)?;
        }
        for r in &self.out_res {
            x = r.forward(&x, ctx)?;
        }
        // tanh form keeps gradients finite for large |z|
        let mut z = self.head.forward(&x)?;
        if self.residual_output {
            let cover = input.narrow(1, 0, 3)?.clamp(1e-3, 1.0 - 1e-3)?;
            let logit = (cover.log()? - (cover.neg()? + 1.0)?.log()?)?;
            z = (z + logit)?;
        }
        Ok((((z * 0.5)?.tanh()? + 1.0)? * 0.5)?)
    }
}

/// Full-resolution decoder producing `D x H x W` logits.
pub struct Decoder {
    stem: ConvBnAct,
    stem_res: ResidualBlock,
    stages: Vec<Box<dyn Block>>,
    head: Conv2d,
}

impl Decoder {
    pub fn new(vp: &VarPath, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let slope = cfg.leaky_slope;
        let base = cfg.base_channels;
        let stem = ConvBnAct::new(
            &vp.pp("stem"),
            3,
            base,
            3,
            ConvCfg::same(3, 1),
            Activation::LeakyRelu(slope),
        )?;
        let stem_res = ResidualBlock::new(&vp.pp("stem_res"), base, slope)?;
        let mut c = base;
        let mut stages = Vec::with_capacity(3);
        for (i, (&width, &dil)) in cfg.pmcb_channels.iter().zip(&cfg.decoder_dilations).enumerate() {
            stages.push(multiscale(
                &vp.pp(format!("stage{i}")),
                cfg.decoder_multiscale,
                c,
                width,
                dil,
                slope,
            )?);
            c = width;
        }
        let head = Conv2d::new(&vp.pp("head"), c, cfg.payload_depth, 1, ConvCfg::default())?;
        Ok(Self {
            stem,
            stem_res,
            stages,
            head,
        })
    }

    pub fn forward(&self, container: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.forward_with_intermediates(container, ctx)?.0)
    }

    /// Logits plus the outputs of the stem and each multi-scale stage.
    pub fn forward_with_intermediates(
        &self,
        container: &Tensor,
        ctx: &Ctx,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let c = container.dim(1)?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects a 3-channel container, got {c}"
            )));
        }
        let mut x = self.stem.forward(container, ctx)?;
        x = self.stem_res.forward(&x, ctx)?;
        let mut inter = vec![x.clone()];
        for s in &self.stages {
            x = s.forward(&x, ctx)?;
            inter.push(x.clone());
        }
        Ok((self.head.forward(&x)?, inter))
    }
}

const KV_KERNEL: [f64; 25] = [
    -1.0, 2.0, -2.0, 2.0, -1.0, //
    2.0, -6.0, 8.0, -6.0, 2.0, //
    -2.0, 8.0, -12.0, 8.0, -2.0, //
    2.0, -6.0, 8.0, -6.0, 2.0, //
    -1.0, 2.0, -2.0, 2.0, -1.0,
];

struct CriticStage {
    unit: ConvBnAct,
    pool: bool,
}

/// Steganalysis critic: five conv stages, spatial pyramid pooling and a
/// two-way classifier. Each image is scored independently.
pub struct Critic {
    kv: Option<Tensor>,
    stages: Vec<CriticStage>,
    levels: Vec<usize>,
    fc1: Linear,
    fc2: Linear,
}

impl Critic {
    pub const MIN_SIDE: usize = 32;

    pub fn new(vp: &VarPath, cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let acts = [
            Activation::Relu,
            Activation::Tanh,
            Activation::Relu,
            Activation::Relu,
            Activation::Relu,
        ];
        let mut stages = Vec::with_capacity(5);
        let mut c = 3;
        for i in 0..5 {
            let k = cfg.critic_kernels[i];
            let last = i == 4;
            let conv = ConvCfg {
                stride: if last { 2 } else { 1 },
                padding: k / 2,
                ..ConvCfg::default()
            };
            stages.push(CriticStage {
                unit: ConvBnAct::new(&vp.pp(format!("stage{i}")), c, cfg.critic_channels[i], k, conv, acts[i])?,
                pool: !last,
            });
            c = cfg.critic_channels[i];
        }
        let kv = if cfg.critic_kv_filter {
            let k: Vec<f64> = KV_KERNEL.iter().map(|v| v / 12.0).collect();
            Some(Tensor::from_vec(k, (1, 1, 5, 5), device)?.to_dtype(dtype)?)
        } else {
            None
        };
        Ok(Self {
            kv,
            stages,
            levels: cfg.spp_levels.clone(),
            fc1: Linear::new(&vp.pp("fc1"), cfg.spp_length(), cfg.critic_hidden)?,
            fc2: Linear::new(&vp.pp("fc2"), cfg.critic_hidden, 2)?,
        })
    }

    /// Pyramid-pooled feature vector, `N x spp_length`.
    pub fn spp_features(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("critic expects 3 channels, got {c}")));
        }
        if h < Self::MIN_SIDE || w < Self::MIN_SIDE {
            return Err(Error::ShapeTooSmall {
                height: h,
                width: w,
                min: Self::MIN_SIDE,
            });
        }
        let mut y = match &self.kv {
            Some(k) => x
                .reshape((n * 3, 1, h, w))?
                .conv2d(k, 2, 1, 1, 1)?
                .reshape((n, 3, h, w))?,
            None => x.clone(),
        };
        for s in &self.stages {
            y = s.unit.forward(&y, ctx)?;
            if s.pool {
                y = y.avg_pool2d(2)?;
            }
        }
        spatial_pyramid_pool(&y, &self.levels)
    }

    /// Two-way logits (`cover`, `stego`), `N x 2`.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let f = self.spp_features(x, ctx)?;
        let hidden = self.fc1.forward(&f)?.relu()?;
        self.fc2.forward(&hidden)
    }

    /// Stego-class probability per image.
    pub fn scores(&self, x: &Tensor, ctx: &Ctx) -> Result<Vec<f64>> {
        let p = softmax(&self.forward(x, ctx)?)?;
        Ok(p.narrow(1, 1, 1)?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }
}

/// Adaptive max pooling at each pyramid level; bin `i` of `n` covers
/// `[floor(i*H/n), ceil((i+1)*H/n))`.
pub fn spatial_pyramid_pool(x: &Tensor, levels: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut parts = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut bins = Vec::with_capacity(level * level);
        for i in 0..level {
            let (hs, he) = (i * h / level, ((i + 1) * h).div_ceil(level));
            for j in 0..level {
                let (ws, we) = (j * w / level, ((j + 1) * w).div_ceil(level));
                let cell = x.narrow(2, hs, he - hs)?.narrow(3, ws, we - ws)?;
                bins.push(cell.flatten_from(2)?.max(2)?);
            }
        }
        // N x C x bins, flattened channel-major
        parts.push(Tensor::stack(&bins, 2)?.reshape((n, c * level * level))?);
    }
    Ok(Tensor::cat(&parts, 1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub critic: usize,
}

impl ParameterCounts {
    pub fn total(&self) -> usize {
        self.encoder + self.decoder + self.critic
    }
}

/// Checkpoint sidecar: everything needed to rebuild the networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub variant: String,
    pub seed: u64,
    pub model: ModelConfig,
}

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const CONFIG_FILE: &str = "model.toml";

/// Encoder, decoder and critic with their parameter stores.
pub struct StegoModel {
    pub config: ModelConfig,
    pub variant: String,
    pub seed: u64,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub critic: Critic,
    encoder_store: VarStore,
    decoder_store: VarStore,
    critic_store: VarStore,
    dtype: DType,
    device: Device,
}

impl StegoModel {
    pub fn new(
        config: ModelConfig,
        variant: impl Into<String>,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let encoder_store = VarStore::new(dtype, device, seed);
        let decoder_store = VarStore::new(dtype, device, seed.wrapping_add(0x9e37_79b9));
        let critic_store = VarStore::new(dtype, device, seed.wrapping_add(0x3c6e_f372));
        let encoder = Encoder::new(&encoder_store.root(), &config)?;
        let decoder = Decoder::new(&decoder_store.root(), &config)?;
        let critic = Critic::new(&critic_store.root(), &config, dtype, device)?;
        Ok(Self {
            config,
            variant: variant.into(),
            seed,
            encoder,
            decoder,
            critic,
            encoder_store,
            decoder_store,
            critic_store,
            dtype,
            device: device.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn payload_depth(&self) -> usize {
        self.config.payload_depth
    }

    pub fn encoder_store(&self) -> &VarStore {
        &self.encoder_store
    }

    pub fn decoder_store(&self) -> &VarStore {
        &self.decoder_store
    }

    pub fn critic_store(&self) -> &VarStore {
        &self.critic_store
    }

    /// Encoder and decoder parameters, the set the codec optimizer owns.
    pub fn codec_vars(&self) -> Vec<(String, Var)> {
        prefixed("encoder", &self.encoder_store.trainable())
            .into_iter()
            .chain(prefixed("decoder", &self.decoder_store.trainable()))
            .collect()
    }

    pub fn critic_vars(&self) -> Vec<(String, Var)> {
        prefixed("critic", &self.critic_store.trainable())
    }

    pub fn parameter_counts(&self) -> ParameterCounts {
        ParameterCounts {
            encoder: count_parameters(&self.encoder_store),
            decoder: count_parameters(&self.decoder_store),
            critic: count_parameters(&self.critic_store),
        }
    }

    pub fn codec_digest(&self) -> Result<String> {
        Ok(format!(
            "{}{}",
            self.encoder_store.digest()?,
            self.decoder_store.digest()?
        ))
    }

    pub fn critic_digest(&self) -> Result<String> {
        self.critic_store.digest()
    }

    fn check_secret(&self, cover: &CoverImage, secret: &SecretTensor) -> Result<()> {
        if secret.depth() != self.config.payload_depth {
            return Err(Error::ConfigMismatch(format!(
                "model embeds {} bit planes but the secret has {}",
                self.config.payload_depth,
                secret.depth()
            )));
        }
        concat_inputs(cover, secret).map(|_| ())
    }

    /// Runs the encoder in inference mode on one cover.
    pub fn embed(&self, cover: &CoverImage, secret: &SecretTensor) -> Result<CoverImage> {
        self.check_secret(cover, secret)?;
        let input = concat_inputs(cover, secret)?
            .to_tensor(self.dtype, &self.device)?
            .unsqueeze(0)?;
        let out = self.encoder.forward(&input, &Ctx::eval())?;
        CoverImage::from_tensor(&out.squeeze(0)?)
    }

    /// Decoder logits `D x H x W` for one container.
    pub fn extract_logits(&self, container: &CoverImage) -> Result<Tensor> {
        let x = container.to_tensor(self.dtype, &self.device)?.unsqueeze(0)?;
        Ok(self.decoder.forward(&x, &Ctx::eval())?.squeeze(0)?)
    }

    pub fn critic_score(&self, image: &CoverImage) -> Result<f64> {
        let x = image.to_tensor(self.dtype, &self.device)?.unsqueeze(0)?;
        Ok(self.critic.scores(&x, &Ctx::eval())?[0])
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            variant: self.variant.clone(),
            seed: self.seed,
            model: self.config.clone(),
        }
    }

    /// Writes `model.safetensors` and the `model.toml` sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for (prefix, store) in [
            ("encoder", &self.encoder_store),
            ("decoder", &self.decoder_store),
            ("critic", &self.critic_store),
        ] {
            for (name, t) in store.tensors() {
                tensors.insert(format!("{prefix}.{name}"), t);
            }
        }
        let weights = dir.join(WEIGHTS_FILE);
        candle_core::safetensors::save(&tensors, &weights)
            .map_err(|e| Error::format(&weights, e))?;
        let sidecar = dir.join(CONFIG_FILE);
        let text = toml::to_string_pretty(&self.meta()).map_err(|e| Error::format(&sidecar, e))?;
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let meta = read_meta(dir)?;
        let model = Self::new(meta.model, meta.variant, meta.seed, dtype, device)?;
        model.load_weights(dir)?;
        Ok(model)
    }

    pub fn load_weights(&self, dir: &Path) -> Result<()> {
        let weights = dir.join(WEIGHTS_FILE);
        if !weights.exists() {
            return Err(Error::io(
                &weights,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint weights not found"),
            ));
        }
        let all = candle_core::safetensors::load(&weights, &self.device)
            .map_err(|e| Error::format(&weights, e))?;
        for (prefix, store) in [
            ("encoder", &self.encoder_store),
            ("decoder", &self.decoder_store),
            ("critic", &self.critic_store),
        ] {
            let p = format!("{prefix}.");
            let sub: HashMap<String, Tensor> = all
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect();
            store.load(&sub).map_err(|e| match e {
                Error::ConfigMismatch(m) => Error::ConfigMismatch(format!("{}: {m}", weights.display())),
                other => other,
            })?;
        }
        Ok(())
    }
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let sidecar: PathBuf = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    toml::from_str(&text).map_err(|e| Error::format(&sidecar, e))
}

fn prefixed(prefix: &str, vars: &[(String, Var)]) -> Vec<(String, Var)> {
    vars.iter()
        .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
        .collect()
}

/// Trainable scalar count of one network.
pub fn count_parameters(store: &VarStore) -> usize {
    store.num_parameters()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::with_base(4, 2)
    }

    #[test]
    fn default_plan_matches_decoder_table() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.pmcb_channels, [192, 288, 512]);
        assert_eq!(cfg.decoder_dilations, [(3, 6), (6, 12), (12, 18)]);
        assert_eq!(cfg.up_channels, [256, 128, 64]);
        assert_eq!(cfg.skip_channels, [128, 64, 32]);
        assert_eq!(cfg.spp_length(), 3840);
        cfg.validate().unwrap();
    }

    #[test]
    fn regressive_down_path_rejected() {
        let mut cfg = tiny();
        cfg.encoder_down_dilations = [(6, 12), (3, 6), (12, 18)];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encoder_rejects_bad_inputs() {
        let m = StegoModel::new(tiny(), "clpstnet", 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 4, 20, 20), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            m.encoder.forward(&x, &Ctx::eval()).unwrap_err(),
            Error::DimensionNotDivisible { .. }
        ));
        let x = Tensor::zeros((1, 5, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.encoder.forward(&x, &Ctx::eval()).unwrap_err(), Error::ShapeMismatch(_)));
    }

    #[test]
    fn critic_rejects_small_inputs() {
        let m = StegoModel::new(tiny(), "clpstnet", 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 32, 24), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            m.critic.forward(&x, &Ctx::eval()).unwrap_err(),
            Error::ShapeTooSmall { min: 32, .. }
        ));
    }

    #[test]
    fn pyramid_bins_cover_small_maps() {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let f = spatial_pyramid_pool(&x, &[1, 3]).unwrap();
        assert_eq!(f.dims2().unwrap(), (1, 10));
        let v = f.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v[0], 3.0);
        // 3x3 bins over 2x2: rows [0,1),[0,2),[1,2)
        assert_eq!(&v[1..], &[0.0, 1.0, 1.0, 2.0, 3.0, 3.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn kv_filter_flag_builds() {
        let mut cfg = tiny();
        cfg.critic_kv_filter = true;
        let m = StegoModel::new(cfg, "clpstnet", 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::ones((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let s = m.critic.scores(&x, &Ctx::eval()).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = StegoModel::new(tiny().payload_depth(2), "clpstnet", 5, DType::F32, &Device::Cpu).unwrap();
        m.save(dir.path()).unwrap();
        let back = StegoModel::load(dir.path(), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.codec_digest().unwrap(), m.codec_digest().unwrap());
        assert_eq!(back.critic_digest().unwrap(), m.critic_digest().unwrap());
        let text = std::fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
        assert!(text.contains("payload_depth = 2"));
        assert!(text.contains("decoder_dilations"));
    }
}
