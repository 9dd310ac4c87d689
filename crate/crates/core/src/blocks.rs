//! Differentiable building blocks shared by the encoder and decoder.
//!
//! All blocks take `N x C x H x W` tensors.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout, Activation, BatchNorm2d, Conv2d, ConvCfg, ConvTranspose2d, Ctx, VarPath};

/// A feature block with a fixed channel contract.
pub trait Block: Send + Sync {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor>;
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
}

fn check_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    let c = x.dim(1)?;
    if c != expected {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects {expected} channels, got {c}"
        )));
    }
    Ok(())
}

/// Convolution, batch normalization, activation.
pub struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Activation,
}

impl ConvBnAct {
    pub fn new(
        vp: &VarPath,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        cfg: ConvCfg,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&vp.pp("conv"), in_channels, out_channels, kernel, cfg.no_bias())?,
            bn: BatchNorm2d::new(&vp.pp("bn"), out_channels)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y, ctx)?;
        self.act.apply(&y)
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }
}

/// Inception widths in the ratio 1:2:1:1:1 (or 1:2:1 without dilated
/// branches), distributed by largest remainder so they sum to `total`.
pub fn proportional_widths(total: usize, ratio: &[usize]) -> Vec<usize> {
    let denom: usize = ratio.iter().sum();
    let mut widths: Vec<usize> = ratio.iter().map(|r| total * r / denom).collect();
    let mut remainders: Vec<(usize, usize)> = ratio
        .iter()
        .enumerate()
        .map(|(i, r)| ((total * r) % denom, i))
        .collect();
    // Largest remainder first; ties go to the earlier branch.
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = total - widths.iter().sum::<usize>();
    for (_, i) in remainders {
        if missing == 0 {
            break;
        }
        widths[i] += 1;
        missing -= 1;
    }
    widths
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmcbConfig {
    pub in_channels: usize,
    /// Output widths of the 1x1, 3x3, 5x5 and (optionally) the two dilated
    /// branches, in concatenation order.
    pub branch_widths: Vec<usize>,
    /// 1x1 reduction widths in front of every branch except the first.
    pub reduce_widths: Vec<usize>,
    /// Dilation pair of the two dilated 3x3 branches. `None` yields a plain
    /// three-branch inception block.
    pub dilations: Option<(usize, usize)>,
    pub leaky_slope: f64,
}

impl PmcbConfig {
    pub const DILATED_RATIO: [usize; 5] = [1, 2, 1, 1, 1];
    pub const INCEPTION_RATIO: [usize; 3] = [1, 2, 1];

    /// Default width plan hitting `out_channels` exactly, reductions at half
    /// the branch width.
    pub fn with_total(in_channels: usize, out_channels: usize, dilations: Option<(usize, usize)>) -> Self {
        let ratio: &[usize] = if dilations.is_some() {
            &Self::DILATED_RATIO
        } else {
            &Self::INCEPTION_RATIO
        };
        let branch_widths = proportional_widths(out_channels, ratio);
        let reduce_widths = branch_widths[1..].iter().map(|w| (w / 2).max(1)).collect();
        Self {
            in_channels,
            branch_widths,
            reduce_widths,
            dilations,
            leaky_slope: 0.01,
        }
    }

    pub fn leaky_slope(mut self, slope: f64) -> Self {
        self.leaky_slope = slope;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.branch_widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let branches = if self.dilations.is_some() { 5 } else { 3 };
        if self.branch_widths.len() != branches || self.reduce_widths.len() != branches - 1 {
            return Err(Error::Config(format!(
                "PMCB needs {branches} branch widths and {} reduction widths, got {} and {}",
                branches - 1,
                self.branch_widths.len(),
                self.reduce_widths.len()
            )));
        }
        if self.in_channels == 0
            || self.branch_widths.iter().chain(&self.reduce_widths).any(|&w| w == 0)
        {
            return Err(Error::Config("PMCB widths must be at least 1".into()));
        }
        if let Some((d1, d2)) = self.dilations {
            if d1 == 0 || d2 == 0 || d1 > d2 {
                return Err(Error::Config(format!(
                    "PMCB dilations must satisfy 1 <= d1 <= d2, got ({d1}, {d2})"
                )));
            }
        }
        Ok(())
    }
}

struct Branch {
    reduce: Option<ConvBnAct>,
    conv: ConvBnAct,
}

impl Branch {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        match &self.reduce {
            Some(r) => self.conv.forward(&r.forward(x, ctx)?, ctx),
            None => self.conv.forward(x, ctx),
        }
    }
}

/// Progressive multi-scale convolution block: parallel 1x1, 3x3, 5x5 and
/// two dilated 3x3 branches, concatenated on channels.
pub struct Pmcb {
    cfg: PmcbConfig,
    branches: Vec<Branch>,
}

impl Pmcb {
    pub fn new(vp: &VarPath, cfg: PmcbConfig) -> Result<Self> {
        cfg.validate()?;
        let act = Activation::LeakyRelu(cfg.leaky_slope);
        let mut geometry = vec![(1usize, 1usize), (3, 1), (5, 1)];
        if let Some((d1, d2)) = cfg.dilations {
            geometry.push((3, d1));
            geometry.push((3, d2));
        }
        let mut branches = Vec::with_capacity(geometry.len());
        for (i, &(kernel, dilation)) in geometry.iter().enumerate() {
            let bp = vp.pp(format!("branch{i}"));
            let width = cfg.branch_widths[i];
            let branch = if i == 0 {
                Branch {
                    reduce: None,
                    conv: ConvBnAct::new(&bp.pp("conv"), cfg.in_channels, width, 1, ConvCfg::default(), act)?,
                }
            } else {
                let mid = cfg.reduce_widths[i - 1];
                Branch {
                    reduce: Some(ConvBnAct::new(
                        &bp.pp("reduce"),
                        cfg.in_channels,
                        mid,
                        1,
                        ConvCfg::default(),
                        act,
                    )?),
                    conv: ConvBnAct::new(
                        &bp.pp("conv"),
                        mid,
                        width,
                        kernel,
                        ConvCfg::same(kernel, dilation),
                        act,
                    )?,
                }
            };
            branches.push(branch);
        }
        Ok(Self { cfg, branches })
    }

    pub fn config(&self) -> &PmcbConfig {
        &self.cfg
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    /// Output of a single branch, before concatenation.
    pub fn branch_forward(&self, index: usize, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        check_channels(x, self.cfg.in_channels, "PMCB")?;
        self.branches[index].forward(x, ctx)
    }
}

impl Block for Pmcb {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        check_channels(x, self.cfg.in_channels, "PMCB")?;
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(x, ctx))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&outs, 1)?)
    }

    fn in_channels(&self) -> usize {
        self.cfg.in_channels
    }

    fn out_channels(&self) -> usize {
        self.cfg.out_channels()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseBlockConfig {
    pub in_channels: usize,
    pub growth: usize,
    pub layers: usize,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
}

impl DenseBlockConfig {
    pub fn new(in_channels: usize, growth: usize) -> Self {
        Self {
            in_channels,
            growth,
            layers: 4,
            dropout_rate: 0.2,
            leaky_slope: 0.01,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers * self.growth
    }
}

/// Densely connected 1x1 layers; every layer sees the concatenation of the
/// block input and all earlier layer outputs.
pub struct DenseBlock {
    cfg: DenseBlockConfig,
    layers: Vec<ConvBnAct>,
}

impl DenseBlock {
    pub fn new(vp: &VarPath, cfg: DenseBlockConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                cfg.dropout_rate
            )));
        }
        let act = Activation::LeakyRelu(cfg.leaky_slope);
        let layers = (0..cfg.layers)
            .map(|k| {
                ConvBnAct::new(
                    &vp.pp(format!("layer{k}")),
                    cfg.in_channels + k * cfg.growth,
                    cfg.growth,
                    1,
                    ConvCfg::default(),
                    act,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, layers })
    }
}

impl Block for DenseBlock {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        check_channels(x, self.cfg.in_channels, "dense block")?;
        let mut features = x.clone();
        for layer in &self.layers {
            let y = layer.forward(&features, ctx)?;
            let y = dropout(&y, self.cfg.dropout_rate, ctx)?;
            features = Tensor::cat(&[&features, &y], 1)?;
        }
        Ok(features)
    }

    fn in_channels(&self) -> usize {
        self.cfg.in_channels
    }

    fn out_channels(&self) -> usize {
        self.cfg.out_channels()
    }
}

/// `y = LeakyReLU(BN(conv3x3(x))) + x`.
pub struct ResidualBlock {
    unit: ConvBnAct,
}

impl ResidualBlock {
    pub fn new(vp: &VarPath, channels: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            unit: ConvBnAct::new(
                &vp.pp("unit"),
                channels,
                channels,
                3,
                ConvCfg::same(3, 1),
                Activation::LeakyRelu(slope),
            )?,
        })
    }
}

impl Block for ResidualBlock {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        check_channels(x, self.unit.in_channels(), "residual block")?;
        Ok((self.unit.forward(x, ctx)? + x)?)
    }

    fn in_channels(&self) -> usize {
        self.unit.in_channels()
    }

    fn out_channels(&self) -> usize {
        self.unit.out_channels()
    }
}

/// Stride-2 3x3 convolution halving the resolution.
pub struct Downsample {
    unit: ConvBnAct,
}

impl Downsample {
    pub fn new(vp: &VarPath, in_channels: usize, out_channels: usize, slope: f64) -> Result<Self> {
        let cfg = ConvCfg {
            stride: 2,
            padding: 1,
            ..ConvCfg::default()
        };
        Ok(Self {
            unit: ConvBnAct::new(&vp.pp("unit"), in_channels, out_channels, 3, cfg, Activation::LeakyRelu(slope))?,
        })
    }
}

impl Block for Downsample {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddDimension { height: h, width: w });
        }
        self.unit.forward(x, ctx)
    }

    fn in_channels(&self) -> usize {
        self.unit.in_channels()
    }

    fn out_channels(&self) -> usize {
        self.unit.out_channels()
    }
}

/// Transposed convolution (kernel 4, stride 2, padding 1), BN, LeakyReLU.
pub struct Upsample {
    deconv: ConvTranspose2d,
    bn: BatchNorm2d,
    act: Activation,
    in_channels: usize,
    out_channels: usize,
}

impl Upsample {
    pub fn new(vp: &VarPath, in_channels: usize, out_channels: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            deconv: ConvTranspose2d::new(&vp.pp("deconv"), in_channels, out_channels, 4, 2, 1, false)?,
            bn: BatchNorm2d::new(&vp.pp("bn"), out_channels)?,
            act: Activation::LeakyRelu(slope),
            in_channels,
            out_channels,
        })
    }
}

impl Block for Upsample {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.deconv.forward(x)?;
        let y = self.bn.forward(&y, ctx)?;
        self.act.apply(&y)
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }
}

/// BN, LeakyReLU, then a 1x1 projection to `out_channels`.
pub struct Transition {
    bn: BatchNorm2d,
    act: Activation,
    conv: Conv2d,
}

impl Transition {
    pub fn new(vp: &VarPath, in_channels: usize, out_channels: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm2d::new(&vp.pp("bn"), in_channels)?,
            act: Activation::LeakyRelu(slope),
            conv: Conv2d::new(&vp.pp("conv"), in_channels, out_channels, 1, ConvCfg::default())?,
        })
    }
}

impl Block for Transition {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        check_channels(x, self.conv.in_channels(), "transition")?;
        let y = self.act.apply(&self.bn.forward(x, ctx)?)?;
        self.conv.forward(&y)
    }

    fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }
}

/// Plain 3x3 stack used by the convolutional baselines: a projecting
/// conv-BN-act followed by `depth - 1` residual blocks.
pub struct PlainStack {
    proj: ConvBnAct,
    residuals: Vec<ResidualBlock>,
}

impl PlainStack {
    pub fn new(vp: &VarPath, in_channels: usize, out_channels: usize, depth: usize, slope: f64) -> Result<Self> {
        let proj = ConvBnAct::new(
            &vp.pp("proj"),
            in_channels,
            out_channels,
            3,
            ConvCfg::same(3, 1),
            Activation::LeakyRelu(slope),
        )?;
        let residuals = (1..depth.max(1))
            .map(|k| ResidualBlock::new(&vp.pp(format!("res{k}")), out_channels, slope))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { proj, residuals })
    }
}

impl Block for PlainStack {
    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut y = self.proj.forward(x, ctx)?;
        for r in &self.residuals {
            y = r.forward(&y, ctx)?;
        }
        Ok(y)
    }

    fn in_channels(&self) -> usize {
        self.proj.in_channels()
    }

    fn out_channels(&self) -> usize {
        self.proj.out_channels()
    }
}
