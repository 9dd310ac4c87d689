//! Payload codec: bit messages, secret planes, cover images and the
//! concatenated encoder input.
//!
//! Bits are laid out in the secret tensor channel-first, then row, then
//! column. Secret planes hold `{0, 1}`; cover pixels are scaled to `[0, 1]`
//! by dividing 8-bit samples by 255.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;

use crate::error::{Error, Result};

/// An ordered sequence of bits, each stored as `0` or `1`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitPayload {
    bits: Vec<u8>,
}

impl BitPayload {
    /// Builds a payload from raw bit values; any nonzero byte counts as `1`.
    pub fn new(bits: impl IntoIterator<Item = u8>) -> Self {
        Self {
            bits: bits.into_iter().map(|b| u8::from(b != 0)).collect(),
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self {
            bits: bits.iter().map(|&b| u8::from(b)).collect(),
        }
    }

    /// Unpacks bytes most-significant-bit first.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let bits = bytes
            .iter()
            .flat_map(|&byte| (0..8).rev().map(move |k| (byte >> k) & 1))
            .collect();
        Self { bits }
    }

    /// Packs bits most-significant-bit first; a trailing partial byte is
    /// padded with zero bits.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits
            .chunks(8)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (k, &b)| acc | (b << (7 - k)))
            })
            .collect()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Extends the payload with zero bits up to `len`.
    pub fn zero_padded(&self, len: usize) -> Self {
        let mut bits = self.bits.clone();
        bits.resize(len.max(bits.len()), 0);
        Self { bits }
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            bits: self.bits[..len.min(self.bits.len())].to_vec(),
        }
    }
}

/// Binary secret planes of shape `D x H x W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretTensor {
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SecretTensor {
    pub fn zeros(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
            data: vec![0; depth * height * width],
        }
    }

    pub fn from_vec(depth: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        let expected = depth * height * width;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            depth,
            height,
            width,
            data: data.into_iter().map(|b| u8::from(b != 0)).collect(),
        })
    }

    /// Samples i.i.d. Bernoulli(0.5) planes.
    pub fn random<R: rand::Rng + ?Sized>(
        depth: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let data = (0..depth * height * width)
            .map(|_| u8::from(rng.random::<bool>()))
            .collect();
        Self {
            depth,
            height,
            width,
            data,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let values: Vec<f32> = self.data.iter().map(|&b| f32::from(b)).collect();
        Ok(Tensor::from_vec(values, (self.depth, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// An RGB image `3 x H x W` with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl CoverImage {
    /// Values are clamped into `[0, 1]`.
    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = 3 * height * width;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "cover needs 3x{height}x{width} = {expected} samples, got {}",
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); 3 * height * width],
        }
    }

    /// Reads a `3 x H x W` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 channels, got {c}"
            )));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_vec(h, w, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (3, self.height, self.width), device)?
            .to_dtype(dtype)?)
    }

    /// Quantizes to 8 bits and returns an RGB raster.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let plane = self.height * self.width;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let idx = y as usize * self.width + x as usize;
            image::Rgb([0, 1, 2].map(|c| quantize(self.data[c * plane + idx])))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = h * w;
        let mut data = vec![0f32; 3 * plane];
        for (x, y, px) in img.enumerate_pixels() {
            let idx = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * plane + idx] = f32::from(px[c]) / 255.0;
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    /// Writes a lossless PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::format(path, other),
            })
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Channel concatenation of a cover and its secret planes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl EncoderInput {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn payload_depth(&self) -> usize {
        self.channels - 3
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channels `[from, to)` as a flat vector.
    pub fn channel_range(&self, from: usize, to: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[from * plane..to * plane]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_vec(self.data.clone(), (self.channels, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }
}

/// Lays bits into a `d x h x w` tensor in channel, row, column order.
pub fn encode_payload(bits: &BitPayload, d: usize, h: usize, w: usize) -> Result<SecretTensor> {
    if d == 0 {
        return Err(Error::Config("payload depth must be at least 1".into()));
    }
    SecretTensor::from_vec(d, h, w, bits.bits().to_vec())
}

/// Inverse of [`encode_payload`].
pub fn flatten_payload(t: &SecretTensor) -> BitPayload {
    BitPayload {
        bits: t.data.clone(),
    }
}

pub fn concat_inputs(cover: &CoverImage, secret: &SecretTensor) -> Result<EncoderInput> {
    if cover.height != secret.height || cover.width != secret.width {
        return Err(Error::ShapeMismatch(format!(
            "cover is {}x{} but secret is {}x{}",
            cover.height, cover.width, secret.height, secret.width
        )));
    }
    let mut data = Vec::with_capacity(cover.data.len() + secret.data.len());
    data.extend_from_slice(&cover.data);
    data.extend(secret.data.iter().map(|&b| f32::from(b)));
    Ok(EncoderInput {
        channels: 3 + secret.depth,
        height: cover.height,
        width: cover.width,
        data,
    })
}

/// Loads an image, promotes it to RGB and resizes it bilinearly to
/// `(height, width)`.
pub fn load_image(path: &Path, target: (usize, usize)) -> Result<CoverImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (h, w) = target;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != w || rgb.height() as usize != h {
        rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
    }
    Ok(CoverImage::from_rgb8(&rgb))
}

/// Loads an image at its stored size.
pub fn load_image_native(path: &Path) -> Result<CoverImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(CoverImage::from_rgb8(&img.to_rgb8()))
}

/// Hard decision on logit planes; a logit of exactly zero decodes as `1`.
pub fn threshold_bits(logits: &Tensor) -> Result<SecretTensor> {
    let (d, h, w) = logits.dims3()?;
    let values = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let data = values.into_iter().map(|z| u8::from(z >= 0.0)).collect();
    SecretTensor::from_vec(d, h, w, data)
}
