//! Python bindings: payload packing, image metrics and the trained model.
//!
//! Images cross the boundary as flat `float` lists in channel-major order
//! (`3 x H x W`, values in `[0, 1]`); bit planes as flat `0/1` lists
//! (`D x H x W`).

use std::path::PathBuf;

use candle_core::{DType, Device};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use clpst::eval::{evaluate, EvalOptions};
use clpst::losses::{psnr_images, ssim_images, SsimParams};
use clpst::networks::{ModelConfig, StegoModel};
use clpst::payload::{encode_payload, flatten_payload, threshold_bits, BitPayload, CoverImage, SecretTensor};
use clpst::trainer::{load_manifest_images, VARIANTS};
use clpst::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Tensor(_) | Error::NonFiniteLoss { .. } | Error::NonFinite(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image(height: usize, width: usize, data: Vec<f32>) -> PyResult<CoverImage> {
    CoverImage::from_vec(height, width, data).map_err(py_err)
}

fn bit_payload(bits: Vec<u8>) -> PyResult<BitPayload> {
    if let Some(b) = bits.iter().find(|&&b| b > 1) {
        return Err(PyValueError::new_err(format!("bits must be 0 or 1, got {b}")));
    }
    Ok(BitPayload::new(bits))
}

// a Vec<u8> would come out as `bytes`; bits should be a list of ints
fn bit_list(bits: &[u8]) -> Vec<u32> {
    bits.iter().map(|&b| b as u32).collect()
}

/// Unpacks bytes into bits, most significant bit first.
#[pyfunction]
fn bytes_to_bits(data: &[u8]) -> Vec<u32> {
    bit_list(BitPayload::from_bytes(data).bits())
}

/// Packs bits into bytes, zero-padding the last byte.
#[pyfunction]
fn bits_to_bytes<'py>(py: Python<'py>, bits: Vec<u8>) -> PyResult<Bound<'py, PyBytes>> {
    Ok(PyBytes::new(py, &bit_payload(bits)?.to_bytes()))
}

/// Lays `D*H*W` bits out as planes (row-major per plane) and returns them flat.
#[pyfunction]
fn encode_bits(bits: Vec<u8>, depth: usize, height: usize, width: usize) -> PyResult<Vec<u32>> {
    let t = encode_payload(&bit_payload(bits)?, depth, height, width).map_err(py_err)?;
    Ok(bit_list(t.data()))
}

/// Inverse of [`encode_bits`].
#[pyfunction]
fn flatten_bits(planes: Vec<u8>, depth: usize, height: usize, width: usize) -> PyResult<Vec<u32>> {
    let t = SecretTensor::from_vec(depth, height, width, planes).map_err(py_err)?;
    Ok(bit_list(flatten_payload(&t).bits()))
}

#[pyfunction]
fn psnr(height: usize, width: usize, a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    psnr_images(&image(height, width, a)?, &image(height, width, b)?).map_err(py_err)
}

/// Gaussian-window SSIM averaged over channels.
#[pyfunction]
fn ssim(height: usize, width: usize, a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    ssim_images(&image(height, width, a)?, &image(height, width, b)?, &SsimParams::default()).map_err(py_err)
}

#[pyfunction]
fn variants() -> Vec<&'static str> {
    VARIANTS.to_vec()
}

/// Reads an image at its native size: `(height, width, data)`.
#[pyfunction]
fn load_image(path: PathBuf) -> PyResult<(usize, usize, Vec<f32>)> {
    let im = clpst::payload::load_image_native(&path).map_err(py_err)?;
    Ok((im.height(), im.width(), im.data().to_vec()))
}

#[pyfunction]
fn save_png(path: PathBuf, height: usize, width: usize, data: Vec<f32>) -> PyResult<()> {
    image(height, width, data)?.save_png(&path).map_err(py_err)
}

/// Encoder, decoder and critic, either freshly initialized or loaded from a
/// checkpoint directory.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: StegoModel,
}

#[pymethods]
impl PyModel {
    /// Untrained model. `base` and `growth` scale the channel plan; the
    /// defaults give the full-size network.
    #[new]
    #[pyo3(signature = (payload_depth=1, base=32, growth=16, variant="clpstnet", seed=0))]
    fn new(payload_depth: usize, base: usize, growth: usize, variant: &str, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::with_base(base, growth).payload_depth(payload_depth);
        let inner = clpst::trainer::build_model(variant, &cfg, seed, &Device::Cpu).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = StegoModel::load(&path, DType::F32, &Device::Cpu).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn payload_depth(&self) -> usize {
        self.inner.payload_depth()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.clone()
    }

    fn parameter_counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.inner.parameter_counts();
        let d = PyDict::new(py);
        d.set_item("encoder", c.encoder)?;
        d.set_item("decoder", c.decoder)?;
        d.set_item("critic", c.critic)?;
        Ok(d)
    }

    /// Hides up to `D*H*W` bits (zero-padded) in the cover; returns the
    /// container as a flat list.
    fn embed(&self, py: Python<'_>, height: usize, width: usize, cover: Vec<f32>, bits: Vec<u8>) -> PyResult<Vec<f32>> {
        let cover = image(height, width, cover)?;
        let payload = bit_payload(bits)?;
        let capacity = self.inner.payload_depth() * height * width;
        if payload.len() > capacity {
            return Err(py_err(Error::CapacityExceeded {
                requested: payload.len(),
                capacity,
            }));
        }
        let d = self.inner.payload_depth();
        let out = py.detach(|| -> clpst::Result<CoverImage> {
            let secret = encode_payload(&payload.zero_padded(capacity), d, height, width)?;
            self.inner.embed(&cover, &secret)
        });
        Ok(out.map_err(py_err)?.data().to_vec())
    }

    /// First `n` recovered bits (all of them when `n` is omitted).
    #[pyo3(signature = (height, width, container, n=None))]
    fn extract(&self, py: Python<'_>, height: usize, width: usize, container: Vec<f32>, n: Option<usize>) -> PyResult<Vec<u32>> {
        let container = image(height, width, container)?;
        let bits = py
            .detach(|| -> clpst::Result<BitPayload> {
                Ok(flatten_payload(&threshold_bits(&self.inner.extract_logits(&container)?)?))
            })
            .map_err(py_err)?;
        let n = n.unwrap_or(bits.len());
        if n > bits.len() {
            return Err(py_err(Error::CapacityExceeded {
                requested: n,
                capacity: bits.len(),
            }));
        }
        Ok(bit_list(bits.truncated(n).bits()))
    }

    /// Critic probability that the image carries a payload.
    fn critic_score(&self, height: usize, width: usize, data: Vec<f32>) -> PyResult<f64> {
        self.inner.critic_score(&image(height, width, data)?).map_err(py_err)
    }

    /// Metrics over a manifest, as a dict.
    #[pyo3(signature = (manifest, image_size=128, seed=0, msssim_scales=4))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        manifest: PathBuf,
        image_size: usize,
        seed: u64,
        msssim_scales: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let dataset = manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let opts = EvalOptions {
            seed,
            msssim_scales,
            ..EvalOptions::default()
        };
        let rec = py
            .detach(|| -> clpst::Result<_> {
                let images = load_manifest_images(&manifest, image_size)?;
                evaluate(&self.inner, &images, &dataset, &opts)
            })
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("dataset", rec.dataset)?;
        d.set_item("variant", rec.variant)?;
        d.set_item("payload_depth", rec.payload_depth)?;
        d.set_item("ssim", rec.ssim)?;
        d.set_item("msssim", rec.msssim)?;
        d.set_item("psnr", rec.psnr)?;
        d.set_item("rmse", rec.rmse)?;
        d.set_item("accuracy", rec.accuracy)?;
        d.set_item("accuracy_quantized", rec.accuracy_quantized)?;
        d.set_item("images", rec.images)?;
        d.set_item("seed", rec.seed)?;
        Ok(d)
    }
}

#[pymodule]
fn clpst_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(bytes_to_bits, m)?)?;
    m.add_function(wrap_pyfunction!(bits_to_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(encode_bits, m)?)?;
    m.add_function(wrap_pyfunction!(flatten_bits, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_png, m)?)?;
    Ok(())
}
