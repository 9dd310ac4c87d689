#![allow(dead_code)]

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clpst::cli::ConfigFile;
use clpst::networks::ModelConfig;
use clpst::payload::CoverImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth colour fields with a little grain: sums of random plane waves.
pub fn synth_images(n: usize, size: usize, seed: u64) -> Vec<CoverImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p: Vec<f32> = (0..12).map(|_| rng.random::<f32>()).collect();
            let mut data = Vec::with_capacity(3 * size * size);
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let (fx, fy) = (x as f32 / size as f32, y as f32 / size as f32);
                        let v = 0.5
                            + 0.3 * (p[c] * 9.0 * fx + p[3 + c] * 7.0 * fy + p[6 + c] * 6.0).sin()
                            + 0.15 * (p[9] * 20.0 * fx * fy).cos()
                            + 0.04 * (rng.random::<f32>() - 0.5);
                        data.push(v);
                    }
                }
            }
            CoverImage::from_vec(size, size, data).unwrap()
        })
        .collect()
}

/// Writes the images as PNGs plus a manifest listing them; returns the
/// manifest path. PNG storage quantizes to 8 bits.
pub fn write_dataset(dir: &Path, name: &str, images: &[CoverImage]) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let mut lines = Vec::new();
    for (i, im) in images.iter().enumerate() {
        let p = dir.join(format!("{name}_{i:03}.png"));
        im.save_png(&p).unwrap();
        lines.push(p.file_name().unwrap().to_string_lossy().into_owned());
    }
    let manifest = dir.join(format!("{name}.txt"));
    std::fs::write(&manifest, lines.join("\n") + "\n").unwrap();
    manifest
}

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn desk_config() -> ConfigFile {
    ConfigFile::load(&configs_dir().join("desk.toml")).unwrap()
}

/// Smallest sensible plan, for mechanics tests.
pub fn tiny_model() -> ModelConfig {
    ModelConfig::with_base(3, 1)
}

pub fn random_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Relative error used by the finite-difference checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences of `f` at `x` along a deterministic sample of
/// coordinates, compared against `analytic`. Returns the worst relative
/// error, measured as `|g - fd| / max(|g|, |fd|, floor)` where the floor is
/// a tiny fraction (1e-6) of the gradient's overall scale.
pub fn fd_check(
    f: &dyn Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    samples: usize,
    h: f64,
) -> f64 {
    let xs = values(x);
    let g = values(analytic);
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-6).max(1e-12);
    let step = (xs.len() / samples).max(1);
    let mut worst = 0.0f64;
    for i in (0..xs.len()).step_by(step).take(samples) {
        let mut plus = xs.clone();
        plus[i] += h;
        let mut minus = xs.clone();
        minus[i] -= h;
        let tp = Tensor::from_vec(plus, x.shape(), &Device::Cpu).unwrap();
        let tm = Tensor::from_vec(minus, x.shape(), &Device::Cpu).unwrap();
        let fd = (f(&tp) - f(&tm)) / (2.0 * h);
        let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
