//! Minimal layer toolkit on top of `candle-core`.
//!
//! Parameters live in a [`VarStore`] keyed by dotted path so that
//! initialization is seeded and checkpoints are stable across runs.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

struct StoreInner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named trainable parameters and non-trainable buffers (batch-norm
/// running statistics) of one network.
#[derive(Clone)]
pub struct VarStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl VarStore {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: device.clone(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, StoreInner> {
        self.inner.lock().expect("var store poisoned")
    }

    pub fn root(&self) -> VarPath {
        VarPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.lock()
            .buffers
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.lock().params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters and buffers, for serialization.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.lock();
        inner
            .params
            .iter()
            .chain(inner.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter and buffer from `tensors`. All names must
    /// be present with matching shapes.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        for (name, var) in inner.params.iter().chain(inner.buffers.iter()) {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint has no tensor '{name}'")))?;
            if src.dims() != var.dims() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor '{name}' has shape {:?} in checkpoint but {:?} in model",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names and raw values of the trainable parameters.
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.trainable() {
            hasher.update(name.as_bytes());
            let values = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    fn uniform(&self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut inner = self.lock();
        let values: Vec<f64> = (0..n)
            .map(|_| inner.rng.random_range(-bound..=bound))
            .collect();
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }
}

/// A prefix into a [`VarStore`].
#[derive(Clone)]
pub struct VarPath {
    store: VarStore,
    prefix: String,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Uniform(f64),
    Const(f64),
}

impl VarPath {
    pub fn pp(&self, name: impl std::fmt::Display) -> VarPath {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        VarPath {
            store: self.store.clone(),
            prefix,
        }
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn make(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        match init {
            Init::Uniform(bound) => self.store.uniform(shape, bound),
            Init::Const(c) => Ok(
                (Tensor::ones(shape, self.store.dtype, &self.store.device)? * c)?,
            ),
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = self.make(shape, init)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        let key = self.key(name);
        let mut inner = self.store.lock();
        if inner.params.insert(key.clone(), var).is_some() {
            return Err(Error::Config(format!("duplicate parameter '{key}'")));
        }
        Ok(tensor)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let t = self.make(shape, init)?;
        let var = Var::from_tensor(&t)?;
        let key = self.key(name);
        let mut inner = self.store.lock();
        if inner.buffers.insert(key.clone(), var.clone()).is_some() {
            return Err(Error::Config(format!("duplicate buffer '{key}'")));
        }
        Ok(var)
    }
}

/// How batch normalization behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics left untouched.
    TrainFrozen,
    /// Running statistics.
    Eval,
    /// Normalization skipped entirely (identity).
    Bypass,
}

/// Per-forward settings: normalization mode and the dropout stream.
pub struct Ctx {
    pub norm: NormMode,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            norm: NormMode::Eval,
            dropout_rng: None,
        }
    }

    pub fn bypass() -> Self {
        Self {
            norm: NormMode::Bypass,
            dropout_rng: None,
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            norm: NormMode::Train,
            dropout_rng: Some(RefCell::new(rng)),
        }
    }

    pub fn with_norm(norm: NormMode, dropout_rng: Option<ChaCha8Rng>) -> Self {
        Self {
            norm,
            dropout_rng: dropout_rng.map(RefCell::new),
        }
    }

    /// Hands back the dropout stream, if any.
    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.dropout_rng.map(RefCell::into_inner)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match *self {
            Activation::LeakyRelu(slope) => leaky_relu(x, slope)?,
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
            Activation::Identity => x.clone(),
        })
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Inverted dropout; identity when the context carries no dropout stream.
pub fn dropout(x: &Tensor, rate: f64, ctx: &Ctx) -> Result<Tensor> {
    let Some(rng) = ctx.dropout_rng.as_ref() else {
        return Ok(x.clone());
    };
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let n = x.elem_count();
    let mask: Vec<f32> = {
        let mut rng = rng.borrow_mut();
        (0..n)
            .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
            .collect()
    };
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl Default for ConvCfg {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: true,
        }
    }
}

impl ConvCfg {
    /// Stride-1 convolution that preserves spatial size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            ..Self::default()
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    cfg: ConvCfg,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(
        vp: &VarPath,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        cfg: ConvCfg,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = vp.param(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            Init::Uniform(bound),
        )?;
        let bias = if cfg.bias {
            Some(vp.param("bias", &[out_channels], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            cfg,
            in_channels,
            out_channels,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "convolution expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let y = x.conv2d(
            &self.weight,
            self.cfg.padding,
            self.cfg.stride,
            self.cfg.dilation,
            1,
        )?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution; weight layout `in x out x k x k`.
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    in_channels: usize,
    out_channels: usize,
}

impl ConvTranspose2d {
    pub fn new(
        vp: &VarPath,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (out_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = vp.param(
            "weight",
            &[in_channels, out_channels, kernel, kernel],
            Init::Uniform(bound),
        )?;
        let bias = if bias {
            Some(vp.param("bias", &[out_channels], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "transposed convolution expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(vp: &VarPath, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: vp.param("weight", &[channels], Init::Const(1.0))?,
            beta: vp.param("bias", &[channels], Init::Const(0.0))?,
            running_mean: vp.buffer("running_mean", &[channels], Init::Const(0.0))?,
            running_var: vp.buffer("running_var", &[channels], Init::Const(1.0))?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let shape = (1, self.channels, 1, 1);
        let (mean, var) = match ctx.norm {
            NormMode::Bypass => return Ok(x.clone()),
            NormMode::Eval => (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            ),
            NormMode::Train | NormMode::TrainFrozen => {
                let mean = x.mean_keepdim((0, 2, 3))?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
                if ctx.norm == NormMode::Train {
                    let (n, _, h, w) = x.dims4()?;
                    let count = (n * h * w) as f64;
                    let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    let m = self.momentum;
                    let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                        + (mean.detach().flatten_all()? * m)?)?;
                    let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                        + (var.detach().flatten_all()? * (m * unbiased))?)?;
                    self.running_mean.set(&new_mean)?;
                    self.running_var.set(&new_var)?;
                }
                (mean, var)
            }
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
    in_features: usize,
}

impl Linear {
    pub fn new(vp: &VarPath, in_features: usize, out_features: usize) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        Ok(Self {
            weight: vp.param("weight", &[out_features, in_features], Init::Uniform(bound))?,
            bias: vp.param("bias", &[out_features], Init::Uniform(bound))?,
            in_features,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = x.dim(D::Minus1)?;
        if f != self.in_features {
            return Err(Error::ShapeMismatch(format!(
                "linear layer expects {} features, got {f}",
                self.in_features
            )));
        }
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}
