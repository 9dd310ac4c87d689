//! Acceptance suite: one line per criterion, run in order in a single
//! process so timing limits are measured without contention. Exits non-zero
//! if any hard criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use clpst::blocks::{Pmcb, PmcbConfig};
use clpst::eval::{ablation_suite, evaluate, EvalOptions, MetricsRecord};
use clpst::losses::{
    decode_loss, embedding_loss, msssim, psnr, ssim, LossWeights, MsSsimParams, SsimParams,
};
use clpst::networks::{ModelConfig, StegoModel};
use clpst::nn::{Ctx, VarStore};
use clpst::payload::{encode_payload, flatten_payload, load_image_native, BitPayload, CoverImage};
use clpst::trainer::{build_model, load_manifest_images, TrainConfig, Trainer, VARIANTS};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    /// Reported, never fails the run.
    SoftFail(String),
}

type Criterion = fn(&mut Shared) -> Outcome;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

/// State shared by the criteria that reuse the overfit run.
#[derive(Default)]
struct Shared {
    overfit: Option<Overfit>,
}

struct Overfit {
    _dir: tempfile::TempDir,
    manifest: PathBuf,
    checkpoint: PathBuf,
    steps: u64,
    record: MetricsRecord,
    /// Evaluation after the capacity-comparison budget.
    early: Option<MetricsRecord>,
    elapsed: Duration,
}

const CAPACITY_BUDGET: u64 = 300;
const EVAL_STRIDE: u64 = 100;

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("codec round trip", codec_round_trip),
        ("shape suite", shape_suite),
        ("metric identities", metric_identities),
        ("gradient checks", gradient_checks),
        ("multi-scale receptive field", receptive_field),
        ("training mechanics", training_mechanics),
        ("overfit proxy", overfit_proxy),
        ("capacity trend (soft)", capacity_trend),
        ("ablation harness", ablation_harness),
        ("cli round trip", cli_round_trip),
    ];
    let mut shared = Shared::default();
    let mut hard_failures = 0;
    // ACCEPTANCE_ONLY=1,4,7 runs a subset while iterating locally
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut shared)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Outcome::Fail(format!("panicked: {msg}"))
            });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                hard_failures += 1;
                ("FAIL", d)
            }
            Outcome::SoftFail(d) => ("SOFT-FAIL", d),
        };
        println!("acceptance {:>2} {tag:<9} {name} [{secs:.1}s]: {detail}", i + 1);
    }
    if hard_failures > 0 {
        println!("acceptance: {hard_failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all hard criteria passed");
}

fn codec_round_trip(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sides = [8usize, 64, 128];
    let mut mismatches = 0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=6usize);
        let h = sides[rng.random_range(0..3)];
        let w = sides[rng.random_range(0..3)];
        let bits = BitPayload::new((0..d * h * w).map(|_| rng.random_range(0..2u8)));
        let planes = encode_payload(&bits, d, h, w).unwrap();
        if flatten_payload(&planes) != bits {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    check(
        mismatches == 0 && t < Duration::from_secs(10),
        format!("{mismatches} mismatches over 1000 payloads in {:.2}s (limit 10s)", t.as_secs_f64()),
    )
}

fn shape_suite(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let dev = Device::Cpu;
    let ctx = Ctx::eval();
    let mut problems = Vec::new();
    let mut inter_channels = Vec::new();
    for d in 1..=6 {
        let model = StegoModel::new(ModelConfig::default().payload_depth(d), "clpstnet", d as u64, DType::F32, &dev).unwrap();
        for s in [64usize, 128] {
            let x = random_tensor(&[1, 3 + d, s, s], (d * s) as u64, DType::F32);
            let container = model.encoder.forward(&x, &ctx).unwrap();
            if container.dims() != [1, 3, s, s] {
                problems.push(format!("encoder D={d} {s}px -> {:?}", container.dims()));
            }
            let v = values(&container);
            if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
                problems.push(format!("container out of range at D={d} {s}px"));
            }
            let (logits, inter) = model.decoder.forward_with_intermediates(&container, &ctx).unwrap();
            if logits.dims() != [1, d, s, s] {
                problems.push(format!("decoder D={d} {s}px -> {:?}", logits.dims()));
            }
            inter_channels = inter[1..].iter().map(|t| t.dim(1).unwrap()).collect();
            if inter.iter().any(|t| t.dims()[2..] != [s, s]) {
                problems.push(format!("decoder intermediate not full resolution at {s}px"));
            }
            let spp = model.critic.spp_features(&container, &ctx).unwrap();
            let scores = model.critic.scores(&container, &ctx).unwrap();
            if spp.dims() != [1, 3840] || scores.iter().any(|p| !(0.0..=1.0).contains(p)) {
                problems.push(format!("critic D={d} {s}px: spp {:?}", spp.dims()));
            }
        }
    }
    if inter_channels != [192, 288, 512] {
        problems.push(format!("decoder stage widths {inter_channels:?}"));
    }
    let t = start.elapsed();
    if t > Duration::from_secs(60) {
        problems.push(format!("runtime {:.1}s exceeds 60s", t.as_secs_f64()));
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("D=1..6 at 64/128 px, decoder widths {inter_channels:?}, spp 3840, {:.1}s", t.as_secs_f64())
        } else {
            problems.join("; ")
        },
    )
}

fn metric_identities(_: &mut Shared) -> Outcome {
    let dev = Device::Cpu;
    let x = random_tensor(&[2, 3, 128, 128], 3, DType::F64);
    let s_xx = scalar(&ssim(&x, &x, &SsimParams::default()).unwrap());
    let m_xx = scalar(&msssim(&x, &x, &MsSsimParams::standard(4)).unwrap());
    let base = (random_tensor(&[1, 3, 32, 32], 4, DType::F64) * 0.9).unwrap();
    let shifted = (&base + 0.1).unwrap();
    let p = psnr(&base, &shifted).unwrap();
    let bce = scalar(&decode_loss(
        &Tensor::zeros((1, 2, 8, 8), DType::F64, &dev).unwrap(),
        &random_tensor(&[1, 2, 8, 8], 5, DType::F64).ge(0.5).unwrap(),
    ).unwrap());
    // global SSIM of constants 0.5 and 0.25, C1 = 1e-4, zero variances
    let oracle = (2.0 * 0.5 * 0.25 + 1e-4) / (0.5f64.powi(2) + 0.25f64.powi(2) + 1e-4);
    let c = scalar(&ssim(
        &Tensor::full(0.5f64, (1, 3, 16, 16), &dev).unwrap(),
        &Tensor::full(0.25f64, (1, 3, 16, 16), &dev).unwrap(),
        &SsimParams::global(),
    ).unwrap());
    let ok = (s_xx - 1.0).abs() <= 1e-6
        && (m_xx - 1.0).abs() <= 1e-6
        && (p - 20.0).abs() <= 1e-6
        && (bce - std::f64::consts::LN_2).abs() <= 1e-9
        && (c - oracle).abs() <= 1e-4;
    check(
        ok,
        format!(
            "ssim(x,x)={s_xx:.9} msssim(x,x)={m_xx:.9} psnr={p:.9} bce={bce:.12} constant ssim={c:.7} (oracle {oracle:.7}; the rounded figure 0.80019 is {:.2e} away)",
            (0.80019 - oracle).abs()
        ),
    )
}

fn gradient_checks(_: &mut Shared) -> Outcome {
    let dev = Device::Cpu;
    let x0 = random_tensor(&[1, 1, 16, 16], 10, DType::F64).affine(0.8, 0.1).unwrap();
    let noise = ((random_tensor(&[1, 1, 16, 16], 11, DType::F64) - 0.5).unwrap() * 0.2).unwrap();
    let y = (&x0 + noise).unwrap().clamp(0.0, 1.0).unwrap();
    let sp = SsimParams::default();
    let mut mp = MsSsimParams::standard(2);
    mp.ssim = SsimParams::default().window(5, 1.0);
    let w = LossWeights::default();
    let targets = random_tensor(&[1, 1, 16, 16], 12, DType::F64).ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
    let logits0 = ((random_tensor(&[1, 1, 16, 16], 13, DType::F64) - 0.5).unwrap() * 4.0).unwrap();

    type LossFn<'a> = Box<dyn Fn(&Tensor) -> Tensor + 'a>;
    let cases: Vec<(&str, Tensor, LossFn)> = vec![
        ("ssim", x0.clone(), Box::new(|t: &Tensor| ssim(t, &y, &sp).unwrap())),
        ("msssim(M=2)", x0.clone(), Box::new(|t: &Tensor| msssim(t, &y, &mp).unwrap())),
        ("embedding_loss", x0.clone(), Box::new(|t: &Tensor| embedding_loss(&y, t, &w, &sp, &mp).unwrap())),
        ("decode_loss", logits0, Box::new(|t: &Tensor| decode_loss(t, &targets).unwrap())),
    ];
    let mut worst = Vec::new();
    let mut ok = true;
    for (name, x, f) in &cases {
        let var = Var::from_tensor(x).unwrap();
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().clone();
        let err = fd_check(&|t: &Tensor| scalar(&f(t)), x, &g, 256, 1e-4);
        ok &= err < 1e-3;
        worst.push(format!("{name} {err:.1e}"));
    }
    let _ = dev;
    check(ok, format!("max relative error over all 256 coordinates: {}", worst.join(", ")))
}

fn receptive_field(_: &mut Shared) -> Outcome {
    let ctx = Ctx::bypass();
    let mut mismatches = Vec::new();
    let mut checked = 0;
    for (d1, d2) in [(3, 6), (6, 12), (12, 18)] {
        let store = VarStore::new(DType::F64, &Device::Cpu, 17);
        let block = Pmcb::new(&store.root(), PmcbConfig::with_total(4, 24, Some((d1, d2)))).unwrap();
        for (branch, d) in [(3usize, d1), (4, d2)] {
            let side = 4 * d + 1;
            let c = side / 2;
            let mut data = vec![0.0f64; 4 * side * side];
            data[c * side + c] = 1.0;
            let x = Tensor::from_vec(data, (1, 4, side, side), &Device::Cpu).unwrap();
            let out = block.branch_forward(branch, &x, &ctx).unwrap();
            let v = values(&out.abs().unwrap().sum_keepdim(1).unwrap());
            let mut support = Vec::new();
            for yy in 0..side {
                for xx in 0..side {
                    if v[yy * side + xx] != 0.0 {
                        support.push((yy as isize - c as isize, xx as isize - c as isize));
                    }
                }
            }
            let d = d as isize;
            let mut expected: Vec<(isize, isize)> = [-d, 0, d]
                .iter()
                .flat_map(|&a| [-d, 0, d].map(move |b| (a, b)))
                .collect();
            expected.sort();
            if support != expected {
                mismatches.push(format!("dilation {d}: support {support:?}"));
            }
            checked += 1;
        }
    }
    check(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{checked} dilated branches: impulse support is exactly the 3x3 lattice of step d")
        } else {
            mismatches.join("; ")
        },
    )
}

fn mechanics_trainer(seed: u64) -> (Trainer, Tensor) {
    let cfg = TrainConfig {
        image_size: 32,
        msssim_scales: 2,
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    };
    let model = build_model("clpstnet", &tiny_model(), seed, &Device::Cpu).unwrap();
    let covers = synth_images(2, 32, seed);
    let batch = Tensor::stack(&covers.iter().map(|c| c.to_tensor(DType::F32, &Device::Cpu).unwrap()).collect::<Vec<_>>(), 0).unwrap();
    (Trainer::new(model, cfg).unwrap(), batch)
}

fn training_mechanics(_: &mut Shared) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let (mut t, batch) = mechanics_trainer(3);
    let mut updated_at = Vec::new();
    for _ in 0..25 {
        let codec_before = t.model.codec_digest().unwrap();
        let critic_before = t.model.critic_digest().unwrap();
        let step = t.train_step(&batch).unwrap();
        let codec_changed = t.model.codec_digest().unwrap() != codec_before;
        let critic_changed = t.model.critic_digest().unwrap() != critic_before;
        if step.critic.is_some() {
            updated_at.push(step.batch);
            ok &= critic_changed;
        } else if critic_changed {
            ok = false;
            notes.push(format!("critic weights moved during codec-only batch {}", step.batch));
        }
        ok &= codec_changed;
    }
    ok &= t.critic_updates == 5 && updated_at == [5, 10, 15, 20, 25];
    notes.push(format!("critic updates at batches {updated_at:?}, critic hash fixed on the other 20"));

    let container = t
        .model
        .encoder
        .forward(
            &Tensor::cat(&[&batch, &Tensor::zeros((2, 1, 32, 32), DType::F32, &Device::Cpu).unwrap()], 1).unwrap(),
            &Ctx::eval(),
        )
        .unwrap();
    let codec_before = t.model.codec_digest().unwrap();
    let critic_before = t.model.critic_digest().unwrap();
    t.critic_step(&batch, &container).unwrap();
    let isolated = t.model.codec_digest().unwrap() == codec_before && t.model.critic_digest().unwrap() != critic_before;
    ok &= isolated;
    notes.push(format!("critic step leaves codec hash intact: {isolated}"));

    let (mut z, batch) = mechanics_trainer(4);
    z.set_codec_lr(0.0);
    let before = z.model.codec_digest().unwrap();
    z.train_step(&batch).unwrap();
    let frozen = z.model.codec_digest().unwrap() == before;
    ok &= frozen;
    notes.push(format!("zero-lr step bit-exact: {frozen}"));

    let trace = |seed| {
        let (mut t, batch) = mechanics_trainer(seed);
        for _ in 0..6 {
            t.train_step(&batch).unwrap();
        }
        t.trace
    };
    let same = trace(9) == trace(9);
    ok &= same;
    notes.push(format!("identical 6-step traces at equal seed: {same}"));
    check(ok, notes.join("; "))
}

fn run_overfit(shared: &mut Shared) -> &Overfit {
    if shared.overfit.is_none() {
        let start = Instant::now();
        let desk = desk_config();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), "overfit", &synth_images(8, desk.train.image_size, 21));
        let images = load_manifest_images(&manifest, desk.train.image_size).unwrap();
        let model = build_model("clpstnet", &desk.model, desk.train.seed, &Device::Cpu).unwrap();
        let mut t = Trainer::new(model, desk.train.clone()).unwrap();
        let opts = EvalOptions {
            seed: desk.eval.seed,
            msssim_scales: desk.eval.msssim_scales,
            ..EvalOptions::default()
        };
        let mut early = None;
        let mut record;
        loop {
            t.train_epoch(&images).unwrap();
            let at_stride = t.global_batch % EVAL_STRIDE == 0;
            if !at_stride && !t.budget_spent() {
                continue;
            }
            record = evaluate(&t.model, &images, "overfit", &opts).unwrap();
            if t.global_batch == CAPACITY_BUDGET {
                early = Some(record.clone());
            }
            let reached = record.accuracy > 0.95 && record.psnr > 30.0;
            if t.budget_spent() || (reached && t.global_batch >= CAPACITY_BUDGET) {
                break;
            }
        }
        let checkpoint = dir.path().join("ckpt");
        t.model.save(&checkpoint).unwrap();
        shared.overfit = Some(Overfit {
            _dir: dir,
            manifest,
            checkpoint,
            steps: t.global_batch,
            record,
            early,
            elapsed: start.elapsed(),
        });
    }
    shared.overfit.as_ref().unwrap()
}

fn overfit_proxy(shared: &mut Shared) -> Outcome {
    let run = run_overfit(shared);
    let r = &run.record;
    check(
        run.steps <= 2000 && r.accuracy > 0.95 && r.psnr > 30.0,
        format!(
            "{} steps in {:.0}s: accuracy {:.4} (8-bit {:.4}), psnr {:.2} dB, ssim {:.4}",
            run.steps,
            run.elapsed.as_secs_f64(),
            r.accuracy,
            r.accuracy_quantized,
            r.psnr,
            r.ssim
        ),
    )
}

fn capacity_trend(shared: &mut Shared) -> Outcome {
    let run = run_overfit(shared);
    let Some(d1) = run.early.clone() else {
        return Outcome::SoftFail(format!("overfit run stopped before step {CAPACITY_BUDGET}"));
    };
    let manifest = run.manifest.clone();
    let desk = desk_config();
    let images = load_manifest_images(&manifest, desk.train.image_size).unwrap();
    let model_cfg = desk.model.clone().payload_depth(6);
    let train_cfg = TrainConfig {
        max_steps: Some(CAPACITY_BUDGET),
        ..desk.train.clone()
    };
    let mut t = Trainer::new(build_model("clpstnet", &model_cfg, train_cfg.seed, &Device::Cpu).unwrap(), train_cfg).unwrap();
    while !t.budget_spent() {
        t.train_epoch(&images).unwrap();
    }
    let opts = EvalOptions {
        seed: desk.eval.seed,
        msssim_scales: desk.eval.msssim_scales,
        ..EvalOptions::default()
    };
    let d6 = evaluate(&t.model, &images, "overfit", &opts).unwrap();
    let detail = format!(
        "after {CAPACITY_BUDGET} steps: D=1 psnr {:.2} dB (acc {:.3}), D=6 psnr {:.2} dB (acc {:.3})",
        d1.psnr, d1.accuracy, d6.psnr, d6.accuracy
    );
    if d1.psnr >= d6.psnr {
        Outcome::Pass(detail)
    } else {
        Outcome::SoftFail(detail)
    }
}

fn ablation_harness(_: &mut Shared) -> Outcome {
    let desk = desk_config();
    let images = synth_images(8, desk.train.image_size, 31);
    let train_cfg = TrainConfig {
        max_steps: Some(1),
        ..desk.train.clone()
    };
    let variants: Vec<String> = VARIANTS.iter().map(|s| s.to_string()).collect();
    let report = ablation_suite(&variants, &desk.model, &train_cfg, &images, "synthetic", &Device::Cpu).unwrap();
    let csv = report.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let complete = report.rows.len() == 8
        && report.rows.iter().all(|r| r.record.is_some() && r.error.is_none())
        && report.steps.iter().all(|&s| s == 1)
        && lines.len() == 9
        && lines[0] == "variant,SSIM,MSSSIM,PSNR,RMSE,Accuracy";
    let failures: Vec<String> = report
        .rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.variant)))
        .collect();
    check(
        complete,
        if failures.is_empty() {
            format!("8 variants trained one step each; table has {} rows", lines.len() - 1)
        } else {
            failures.join("; ")
        },
    )
}

fn cli_round_trip(shared: &mut Shared) -> Outcome {
    let run = run_overfit(shared);
    let dir = tempfile::tempdir().unwrap();
    let cover_path = clpst::trainer::read_manifest(&run.manifest).unwrap()[0].clone();
    let cover: CoverImage = load_image_native(&cover_path).unwrap();
    let capacity = cover.height() * cover.width();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let payload: Vec<u8> = (0..capacity / 8).map(|_| rng.random()).collect();
    let payload_path = dir.path().join("payload.bin");
    std::fs::write(&payload_path, &payload).unwrap();
    let stego = dir.path().join("stego.png");
    let recovered = dir.path().join("recovered.bin");
    let exe = env!("CARGO_BIN_EXE_clpst");
    let embed = Command::new(exe)
        .args(["embed", "--model"])
        .arg(&run.checkpoint)
        .arg("--cover")
        .arg(&cover_path)
        .arg("--payload")
        .arg(&payload_path)
        .arg("--out")
        .arg(&stego)
        .output()
        .unwrap();
    if !embed.status.success() {
        return Outcome::Fail(format!("embed failed: {}", String::from_utf8_lossy(&embed.stderr)));
    }
    let extract = Command::new(exe)
        .args(["extract", "--model"])
        .arg(&run.checkpoint)
        .arg("--stego")
        .arg(&stego)
        .args(["--bits", &capacity.to_string(), "--out"])
        .arg(&recovered)
        .output()
        .unwrap();
    if !extract.status.success() {
        return Outcome::Fail(format!("extract failed: {}", String::from_utf8_lossy(&extract.stderr)));
    }
    let got = std::fs::read(&recovered).unwrap();
    let a = BitPayload::from_bytes(&payload);
    let b = BitPayload::from_bytes(&got);
    let same = a.bits().iter().zip(b.bits()).filter(|(x, y)| x == y).count();
    let frac = same as f64 / capacity as f64;
    check(
        b.len() == capacity && frac >= 0.95,
        format!("{same}/{capacity} bits recovered ({frac:.4}) through an 8-bit PNG container"),
    )
}
