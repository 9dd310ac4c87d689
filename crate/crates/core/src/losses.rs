//! Differentiable image-similarity losses and evaluation metrics.
//!
//! Tensor functions take `N x C x H x W` batches and stay on the autograd
//! graph; the `*_images` helpers evaluate single images to `f64`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::payload::{CoverImage, SecretTensor};

/// Standard MS-SSIM scale weights, finest scale first.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimWindow {
    /// Separable Gaussian window, valid convolution.
    Gaussian { size: usize, sigma: f64 },
    /// Statistics over the whole image plane.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub window: SsimWindow,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::with_range(1.0)
    }
}

impl SsimParams {
    pub fn with_range(dynamic_range: f64) -> Self {
        let c2 = (0.03 * dynamic_range).powi(2);
        Self {
            c1: (0.01 * dynamic_range).powi(2),
            c2,
            c3: c2 / 2.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            window: SsimWindow::Gaussian {
                size: 11,
                sigma: 1.5,
            },
        }
    }

    pub fn global() -> Self {
        Self {
            window: SsimWindow::Global,
            ..Self::default()
        }
    }

    pub fn window(mut self, size: usize, sigma: f64) -> Self {
        self.window = SsimWindow::Gaussian { size, sigma };
        self
    }

    fn window_size(&self) -> usize {
        match self.window {
            SsimWindow::Gaussian { size, .. } => size,
            SsimWindow::Global => 1,
        }
    }

    /// With `beta == gamma` and `c3 == c2 / 2` the contrast and structure
    /// terms collapse to `(2 s_xy + c2) / (s_x^2 + s_y^2 + c2)`, which avoids
    /// square roots of variances.
    fn merged_contrast_structure(&self) -> bool {
        self.beta == self.gamma && (self.c3 - self.c2 / 2.0).abs() <= 1e-15
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsSsimParams {
    pub scales: usize,
    /// Per-scale exponents (used for both contrast and structure); the last
    /// one also weights luminance.
    pub weights: Vec<f64>,
    pub ssim: SsimParams,
}

impl Default for MsSsimParams {
    fn default() -> Self {
        Self::standard(5)
    }
}

impl MsSsimParams {
    /// First `scales` standard weights, renormalized to sum to one.
    pub fn standard(scales: usize) -> Self {
        let scales = scales.clamp(1, MSSSIM_WEIGHTS.len());
        let head = &MSSSIM_WEIGHTS[..scales];
        let total: f64 = head.iter().sum();
        Self {
            scales,
            weights: head.iter().map(|w| w / total).collect(),
            ssim: SsimParams::default(),
        }
    }

    /// Largest standard scale count (up to `max_scales`) admissible for an
    /// `height x width` image.
    pub fn for_size(height: usize, width: usize, max_scales: usize) -> Self {
        let side = height.min(width);
        let window = SsimParams::default().window_size();
        let mut m = max_scales.clamp(1, MSSSIM_WEIGHTS.len());
        while m > 1 && side < window << (m - 1) {
            m -= 1;
        }
        Self::standard(m)
    }

    pub fn min_side(&self) -> usize {
        self.ssim.window_size() << (self.scales - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.weights.len() != self.scales {
            return Err(Error::Config(format!(
                "MS-SSIM needs one weight per scale: {} scales, {} weights",
                self.scales,
                self.weights.len()
            )));
        }
        Ok(())
    }
}

/// Embedding-loss and total-loss balance. The embedding weights attach to
/// the named metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ssim: f64,
    pub msssim: f64,
    pub mse: f64,
    pub decode: f64,
    pub steganalysis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim: 0.5,
            msssim: 0.5,
            mse: 0.3,
            decode: 1.0,
            steganalysis: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ssim, self.msssim, self.mse, self.decode, self.steganalysis];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape(x: &Tensor, y: &Tensor, what: &str) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok(())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Local means over `(N*C) x 1 x H x W` planes.
fn local_mean(planes: &Tensor, window: SsimWindow) -> Result<Tensor> {
    match window {
        SsimWindow::Global => Ok(planes.mean_keepdim((2, 3))?),
        SsimWindow::Gaussian { size, sigma } => {
            let g = gaussian_kernel(size, sigma);
            let dev = planes.device();
            let gx = Tensor::from_vec(g.clone(), (1, 1, 1, size), dev)?.to_dtype(planes.dtype())?;
            let gy = Tensor::from_vec(g, (1, 1, size, 1), dev)?.to_dtype(planes.dtype())?;
            Ok(planes.conv2d(&gx, 0, 1, 1, 1)?.conv2d(&gy, 0, 1, 1, 1)?)
        }
    }
}

/// Luminance map and contrast-structure map, both `N x C x h x w`.
fn ssim_maps(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let k = p.window_size();
    if h < k || w < k {
        return Err(Error::WindowTooLarge {
            window: k,
            height: h,
            width: w,
        });
    }
    let xs = x.reshape((n * c, 1, h, w))?;
    let ys = y.reshape((n * c, 1, h, w))?;
    let mu_x = local_mean(&xs, p.window)?;
    let mu_y = local_mean(&ys, p.window)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let var_x = (local_mean(&xs.sqr()?, p.window)? - &mu_xx)?;
    let var_y = (local_mean(&ys.sqr()?, p.window)? - &mu_yy)?;
    let cov = (local_mean(&(&xs * &ys)?, p.window)? - &mu_xy)?;

    let lum = (((mu_xy * 2.0)? + p.c1)? / ((&mu_xx + &mu_yy)? + p.c1)?)?;
    let lum = if p.alpha == 1.0 { lum } else { lum.powf(p.alpha)? };

    let cs = if p.merged_contrast_structure() {
        let cs = (((cov * 2.0)? + p.c2)? / ((&var_x + &var_y)? + p.c2)?)?;
        if p.beta == 1.0 {
            cs
        } else {
            cs.relu()?.powf(p.beta)?
        }
    } else {
        let sd_x = (var_x.relu()? + 1e-12)?.sqrt()?;
        let sd_y = (var_y.relu()? + 1e-12)?.sqrt()?;
        let sd_xy = (&sd_x * &sd_y)?;
        let contrast = (((&sd_xy * 2.0)? + p.c2)? / ((var_x + var_y)? + p.c2)?)?;
        let structure = ((cov + p.c3)? / (&sd_xy + p.c3)?)?;
        (contrast.relu()?.powf(p.beta)? * structure.relu()?.powf(p.gamma)?)?
    };
    let (oh, ow) = (lum.dim(2)?, lum.dim(3)?);
    Ok((lum.reshape((n, c, oh, ow))?, cs.reshape((n, c, oh, ow))?))
}

/// Mean SSIM per image, shape `N`.
pub fn ssim_per_image(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<Tensor> {
    same_shape(x, y, "ssim")?;
    let (lum, cs) = ssim_maps(x, y, p)?;
    Ok((lum * cs)?.flatten_from(1)?.mean(1)?)
}

/// Mean SSIM over the batch (scalar tensor).
pub fn ssim(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<Tensor> {
    Ok(ssim_per_image(x, y, p)?.mean_all()?)
}

/// MS-SSIM per image, shape `N`: contrast-structure at every scale, full
/// SSIM at the coarsest, combined per channel and averaged over channels.
pub fn msssim_per_image(x: &Tensor, y: &Tensor, p: &MsSsimParams) -> Result<Tensor> {
    same_shape(x, y, "msssim")?;
    p.validate()?;
    let (n, c, h, w) = x.dims4()?;
    let min = p.min_side();
    if h.min(w) < min {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            scales: p.scales,
            min,
        });
    }
    let floor = 1e-10;
    let mut x = x.clone();
    let mut y = y.clone();
    let mut acc: Option<Tensor> = None;
    for (j, &weight) in p.weights.iter().enumerate() {
        let (lum, cs) = ssim_maps(&x, &y, &p.ssim)?;
        let term = if j + 1 == p.scales {
            (lum * cs)?.flatten_from(2)?.mean(2)?
        } else {
            cs.flatten_from(2)?.mean(2)?
        };
        let term = term.clamp(floor, f64::MAX)?.powf(weight)?;
        acc = Some(match acc {
            Some(a) => (a * term)?,
            None => term,
        });
        if j + 1 < p.scales {
            x = x.avg_pool2d(2)?;
            y = y.avg_pool2d(2)?;
        }
    }
    let per_channel = acc.expect("at least one scale");
    debug_assert_eq!(per_channel.dims(), &[n, c]);
    Ok(per_channel.mean(1)?)
}

pub fn msssim(x: &Tensor, y: &Tensor, p: &MsSsimParams) -> Result<Tensor> {
    Ok(msssim_per_image(x, y, p)?.mean_all()?)
}

/// Mean squared error per image, shape `N`.
pub fn mse_per_image(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y, "mse")?;
    Ok((x - y)?.sqr()?.flatten_from(1)?.mean(1)?)
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y, "mse")?;
    Ok((x - y)?.sqr()?.mean_all()?)
}

pub fn rmse(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(mse(x, y)?.to_dtype(DType::F64)?.to_scalar::<f64>()?.sqrt())
}

/// PSNR in dB for unit-range data; identical inputs give `+inf`.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?.to_dtype(DType::F64)?.to_scalar::<f64>()?))
}

/// `lambda_mse * MSE + lambda_ssim * (1 - SSIM) + lambda_msssim * (1 - MS-SSIM)`.
pub fn embedding_loss(
    cover: &Tensor,
    container: &Tensor,
    w: &LossWeights,
    sp: &SsimParams,
    mp: &MsSsimParams,
) -> Result<Tensor> {
    same_shape(cover, container, "embedding loss")?;
    let mut loss = (mse(cover, container)? * w.mse)?;
    if w.ssim != 0.0 {
        let s = ssim(cover, container, sp)?;
        loss = (loss + (s.neg()? + 1.0)?.affine(w.ssim, 0.0)?)?;
    }
    if w.msssim != 0.0 {
        let m = msssim(cover, container, mp)?;
        loss = (loss + (m.neg()? + 1.0)?.affine(w.msssim, 0.0)?)?;
    }
    Ok(loss)
}

/// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 targets,
/// evaluated in the numerically stable logit form.
pub fn decode_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    same_shape(logits, targets, "decode loss")?;
    let targets = targets.to_dtype(logits.dtype())?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * targets)?)? + softplus)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageClass {
    Cover = 0,
    Stego = 1,
}

fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Softmax probabilities of a `N x 2` logit batch.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(logits)?.exp()?)
}

/// Mean cross-entropy of `N x 2` critic logits against one class.
pub fn steganalysis_loss(logits: &Tensor, target: ImageClass) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    if k != 2 {
        return Err(Error::ShapeMismatch(format!("critic head must have 2 logits, got {k}")));
    }
    let lp = log_softmax(logits)?.narrow(1, target as usize, 1)?;
    Ok(lp.neg()?.mean_all()?)
}

/// Mean cross-entropy against per-sample labels.
pub fn steganalysis_loss_labels(logits: &Tensor, labels: &[ImageClass]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if k != 2 || n != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "critic logits {n}x{k} vs {} labels",
            labels.len()
        )));
    }
    let onehot: Vec<f32> = labels
        .iter()
        .flat_map(|l| match l {
            ImageClass::Cover => [1.0, 0.0],
            ImageClass::Stego => [0.0, 1.0],
        })
        .collect();
    let onehot = Tensor::from_vec(onehot, (n, 2), logits.device())?.to_dtype(logits.dtype())?;
    Ok((log_softmax(logits)? * onehot)?.sum(1)?.neg()?.mean_all()?)
}

/// `Le + a * Ld + b * Ls`.
pub fn total_loss(encode: f64, decode: f64, steganalysis: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("encode", encode), ("decode", decode), ("steganalysis", steganalysis)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss component ({v})")));
        }
    }
    Ok(encode + w.decode * decode + w.steganalysis * steganalysis)
}

/// Fraction of positions where the bits agree.
pub fn decode_accuracy(secret: &SecretTensor, recovered: &SecretTensor) -> Result<f64> {
    if secret.dims() != recovered.dims() {
        return Err(Error::ShapeMismatch(format!(
            "accuracy: {:?} vs {:?}",
            secret.dims(),
            recovered.dims()
        )));
    }
    let n = secret.data().len();
    if n == 0 {
        return Ok(1.0);
    }
    let same = secret
        .data()
        .iter()
        .zip(recovered.data())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / n as f64)
}

fn image_pair(x: &CoverImage, y: &CoverImage) -> Result<(Tensor, Tensor)> {
    if (x.height(), x.width()) != (y.height(), y.width()) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let dev = Device::Cpu;
    Ok((
        x.to_tensor(DType::F64, &dev)?.unsqueeze(0)?,
        y.to_tensor(DType::F64, &dev)?.unsqueeze(0)?,
    ))
}

pub fn mse_images(x: &CoverImage, y: &CoverImage) -> Result<f64> {
    let (x, y) = image_pair(x, y)?;
    Ok(mse(&x, &y)?.to_scalar::<f64>()?)
}

pub fn rmse_images(x: &CoverImage, y: &CoverImage) -> Result<f64> {
    Ok(mse_images(x, y)?.sqrt())
}

/// PSNR in dB for unit-range images; identical images give `+inf`.
pub fn psnr_images(x: &CoverImage, y: &CoverImage) -> Result<f64> {
    Ok(psnr_from_mse(mse_images(x, y)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn ssim_images(x: &CoverImage, y: &CoverImage, p: &SsimParams) -> Result<f64> {
    let (x, y) = image_pair(x, y)?;
    Ok(ssim(&x, &y, p)?.to_scalar::<f64>()?)
}

pub fn msssim_images(x: &CoverImage, y: &CoverImage, p: &MsSsimParams) -> Result<f64> {
    let (x, y) = image_pair(x, y)?;
    Ok(msssim(&x, &y, p)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(t: Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let x = random((2, 3, 24, 24), 1);
        let y = random((2, 3, 24, 24), 2);
        let p = SsimParams::default();
        assert!((scalar(ssim(&x, &x, &p).unwrap()) - 1.0).abs() < 1e-6);
        let a = scalar(ssim(&x, &y, &p).unwrap());
        let b = scalar(ssim(&y, &x, &p).unwrap());
        assert!((a - b).abs() < 1e-9);
        assert!(a < 0.5);
    }

    #[test]
    fn constant_images_closed_form() {
        let dev = Device::Cpu;
        let x = Tensor::full(0.5f64, (1, 3, 16, 16), &dev).unwrap();
        let y = Tensor::full(0.25f64, (1, 3, 16, 16), &dev).unwrap();
        let expected = (2.0 * 0.125 + 1e-4) / (0.3125 + 1e-4);
        for p in [SsimParams::global(), SsimParams::default()] {
            let s = scalar(ssim(&x, &y, &p).unwrap());
            assert!((s - expected).abs() < 1e-12, "{s}");
        }
        assert!((expected - 0.800064).abs() < 1e-6);
    }

    #[test]
    fn window_too_large() {
        let x = random((1, 1, 10, 12), 3);
        assert!(matches!(
            ssim(&x, &x, &SsimParams::default()).unwrap_err(),
            Error::WindowTooLarge { window: 11, .. }
        ));
    }

    #[test]
    fn unmerged_exponents_agree_at_unity() {
        let x = random((1, 2, 16, 16), 4);
        let y = (random((1, 2, 16, 16), 5) * 0.1).unwrap().add(&x).unwrap();
        let p = SsimParams::default();
        let mut q = p;
        q.c3 = p.c2 / 2.0 + 1e-9;
        let a = scalar(ssim(&x, &y, &p).unwrap());
        let b = scalar(ssim(&x, &y, &q).unwrap());
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }

    #[test]
    fn msssim_identity_and_single_scale() {
        let x = random((1, 3, 48, 48), 6);
        let y = (random((1, 3, 48, 48), 7) * 0.2).unwrap().add(&x).unwrap();
        let p = MsSsimParams::standard(2);
        assert!((scalar(msssim(&x, &x, &p).unwrap()) - 1.0).abs() < 1e-6);
        let one = MsSsimParams::standard(1);
        assert_eq!(one.weights, vec![1.0]);
        let a = scalar(msssim(&x, &y, &one).unwrap());
        let b = scalar(ssim(&x, &y, &SsimParams::default()).unwrap());
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn msssim_too_small() {
        let x = random((1, 3, 64, 64), 8);
        match msssim(&x, &x, &MsSsimParams::standard(5)).unwrap_err() {
            Error::ImageTooSmall { min, .. } => assert_eq!(min, 176),
            e => panic!("{e}"),
        }
        assert!(Error::ImageTooSmall { height: 64, width: 64, scales: 5, min: 176 }
            .to_string()
            .contains("176"));
        assert_eq!(MsSsimParams::for_size(128, 128, 5).scales, 4);
        assert_eq!(MsSsimParams::for_size(32, 32, 5).scales, 2);
    }

    #[test]
    fn psnr_offset_closed_form() {
        let x = CoverImage::filled(16, 16, 0.4);
        let y = CoverImage::filled(16, 16, 0.5);
        assert!((rmse_images(&x, &y).unwrap() - 0.1).abs() < 1e-7);
        assert!((psnr_images(&x, &y).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr_images(&x, &x).unwrap(), f64::INFINITY);
        assert_eq!(mse_images(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn rmse_scales_linearly() {
        let x = random((1, 3, 8, 8), 9);
        let d = (random((1, 3, 8, 8), 10) * 0.05).unwrap();
        let r1 = scalar(mse(&x, &(&x + &d).unwrap()).unwrap()).sqrt();
        let r2 = scalar(mse(&x, &(&x + (&d * 2.0).unwrap()).unwrap()).unwrap()).sqrt();
        assert!((r2 - 2.0 * r1).abs() < 1e-12);
    }

    #[test]
    fn embedding_loss_cases() {
        let x = random((1, 3, 24, 24), 11);
        let y = random((1, 3, 24, 24), 12);
        let w = LossWeights::default();
        let sp = SsimParams::default();
        let mp = MsSsimParams::standard(2);
        assert!(scalar(embedding_loss(&x, &x, &w, &sp, &mp).unwrap()).abs() < 1e-6);
        let mse_only = LossWeights { ssim: 0.0, msssim: 0.0, mse: 1.0, ..w };
        let a = scalar(embedding_loss(&x, &y, &mse_only, &sp, &mp).unwrap());
        assert!((a - scalar(mse(&x, &y).unwrap())).abs() < 1e-15);
        assert!(scalar(embedding_loss(&x, &y, &w, &sp, &mp).unwrap()) > 0.0);
    }

    #[test]
    fn bce_cases() {
        let dev = Device::Cpu;
        let bits = Tensor::new(&[1f64, 0., 1., 1.], &dev).unwrap();
        let logits = Tensor::new(&[20f64, -20., 20., 20.], &dev).unwrap();
        assert!(scalar(decode_loss(&logits, &bits).unwrap()) < 1e-6);
        let zero = Tensor::zeros(4, DType::F64, &dev).unwrap();
        assert!((scalar(decode_loss(&zero, &bits).unwrap()) - 2f64.ln()).abs() < 1e-12);
        let mixed = Tensor::new(&[1.5f64, -0.3, 0.2, 2.0], &dev).unwrap();
        let flipped = Tensor::new(&[0f64, 0., 1., 1.], &dev).unwrap();
        assert!(scalar(decode_loss(&mixed, &flipped).unwrap()) > scalar(decode_loss(&mixed, &bits).unwrap()));
    }

    #[test]
    fn steganalysis_cases() {
        let dev = Device::Cpu;
        let uniform = Tensor::zeros((1, 2), DType::F64, &dev).unwrap();
        for class in [ImageClass::Cover, ImageClass::Stego] {
            let l = scalar(steganalysis_loss(&uniform, class).unwrap());
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
        let strong = Tensor::new(&[[30f64, -30.]], &dev).unwrap();
        assert!(scalar(steganalysis_loss(&strong, ImageClass::Cover).unwrap()) < 1e-12);
        let labels = steganalysis_loss_labels(&strong, &[ImageClass::Cover]).unwrap();
        assert!(scalar(labels) < 1e-12);
    }

    #[test]
    fn steganalysis_pair_sum_minimized_at_uniform() {
        // loss(cover) + loss(stego) over a grid of logit differences
        let dev = Device::Cpu;
        let mut best = (f64::INFINITY, f64::NAN);
        for i in -40..=40 {
            let delta = i as f64 * 0.1;
            let logits = Tensor::new(&[[0f64, delta]], &dev).unwrap();
            let sum = scalar(steganalysis_loss(&logits, ImageClass::Cover).unwrap())
                + scalar(steganalysis_loss(&logits, ImageClass::Stego).unwrap());
            if sum < best.0 {
                best = (sum, delta);
            }
        }
        assert!(best.1.abs() < 1e-9);
        assert!((best.0 - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert!((total_loss(0.2, 0.3, 0.5, &w).unwrap() - 0.55).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let no_critic = LossWeights { steganalysis: 0.0, ..w };
        assert_eq!(
            total_loss(0.2, 0.3, 0.5, &no_critic).unwrap(),
            total_loss(0.2, 0.3, 123.0, &no_critic).unwrap()
        );
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, &w), Err(Error::NonFinite(_))));
    }

    #[test]
    fn accuracy_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = SecretTensor::random(2, 8, 8, &mut rng);
        assert_eq!(decode_accuracy(&s, &s).unwrap(), 1.0);
        let inv = SecretTensor::from_vec(2, 8, 8, s.data().iter().map(|b| 1 - b).collect()).unwrap();
        assert_eq!(decode_accuracy(&s, &inv).unwrap(), 0.0);
        let other = SecretTensor::zeros(1, 8, 8);
        assert!(decode_accuracy(&s, &other).is_err());
    }

    #[test]
    fn random_bits_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = SecretTensor::random(1, 250, 400, &mut rng);
        let b = SecretTensor::random(1, 250, 400, &mut rng);
        let acc = decode_accuracy(&a, &b).unwrap();
        assert!((acc - 0.5).abs() < 0.01, "{acc}");
    }
}
