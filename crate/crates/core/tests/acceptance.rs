//! Acceptance checks, one pass/fail line per criterion.
//!
//! Runs without the libtest harness so every criterion reports even when an
//! earlier one fails; the process exits non-zero if any criterion fails.
//! The ablation criteria use the checked-in fixture `fixtures/toy_fp.mgrq`,
//! retraining it from the bundled task if the file is missing.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mgrq_core::autodiff::Tape;
use mgrq_core::harness::{
    bundled, checkpoint_bytes, checkpoint_from_bytes, checksum, evaluate_top1, load_checkpoint, run_ablation,
    sample_calibration, save_checkpoint, train_toy_fp, AblationReport, Dataset, Split, TrainConfig, ARMS,
};
use mgrq_core::quant::{calibrate, dequantize, fake_quant, fake_quant_var, quantize};
use mgrq_core::reconstruct::{
    block_ibls_loss, ebgs_loss, fuse_losses, ibls_loss, obwr_loss, reconstruct_block, run_mgrq, BlockCache,
    BlockObjective, Components, LossLog,
};
use mgrq_core::vit::{quantize_model, BitWidths, ModelConfig, QuantizeOptions, ViTModel};
use mgrq_core::{Error, ReconstructionConfig, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// SHA-256 of the checked-in fixture (12 epochs, seed 0, bundled task).
const FIXTURE_CHECKSUM: &str = "f9abd8e539946bed41a37dee5f7408ebe8e8ea2cbd0ee9fea471ababe2bcdc9a";
const FIXTURE_TOP1: f64 = 0.923;
/// Measured top-1 per ablation arm at W4/A4 with default settings, in
/// `ARMS` order.
const PINNED_ARMS: [f64; 6] = [0.835, 0.844, 0.829, 0.829, 0.849, 0.851];

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: mgrq_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).unwrap()
}

// ---- criterion 1 ------------------------------------------------------------

fn quantizer_suite() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut elements = 0usize;
    for t in 0..1000 {
        let bits = [2u8, 4, 6, 8][t % 4];
        let n = rng.gen_range(1..=256);
        let (lo, hi): (f64, f64) = (-rng.gen_range(1e-3..100.0), rng.gen_range(1e-3..100.0));
        // Mix of uniform and heavy-tailed samples, always straddling zero.
        let mut data: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    rng.gen_range(lo..hi)
                } else {
                    let u: f64 = rng.gen_range(-1.0..1.0);
                    u.powi(3) * hi.max(-lo)
                }
            })
            .collect();
        data.push(lo);
        data.push(hi);
        let x = Tensor::vector(&data);
        let qp = ok(calibrate(&x, bits))?;
        let s = qp.scales()[0];
        let back = dequantize(&ok(quantize(&x, &qp))?);
        for (a, b) in data.iter().zip(back.data()) {
            ensure((a - b).abs() <= s / 2.0 + 1e-9, || {
                format!("tensor {t}, b={bits}: |{a} - {b}| exceeds s/2 = {}", s / 2.0)
            })?;
        }
        let probe: Vec<f64> = (0..32).map(|_| rng.gen_range(-1e4..1e4)).collect();
        let codes = ok(quantize(&Tensor::vector(&probe), &qp))?;
        ensure(codes.codes().iter().all(|&c| (c as u32) < (1 << bits)), || {
            format!("tensor {t}: code out of range")
        })?;
        let once = ok(fake_quant(&x, &qp))?;
        ensure(ok(fake_quant(&once, &qp))? == once, || format!("tensor {t}: fake_quant not idempotent"))?;
        elements += n + 2;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 tensors, {elements} elements, {:.2}s", elapsed.as_secs_f64()))
}

// ---- criterion 2 ------------------------------------------------------------

/// Relative error between tape gradients and central differences of `f`.
fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    gradcheck_with_step(inputs, f, 1e-4)
}

fn gradcheck_with_step(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var, h: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |perturbed: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out).unwrap()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).unwrap().data().to_vec();
        let numeric: Vec<f64> = (0..input.numel())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / norm(&analytic).max(norm(&numeric)).max(1e-12));
    }
    worst
}

/// Projects `y` onto a fixed random tensor so every output element matters.
fn project(t: &mut Tape, y: Var, proj: &Tensor) -> Var {
    let p = t.constant(proj.clone());
    let m = t.mul(y, p).unwrap();
    t.sum(m)
}

/// Each primitive's relative error at the prescribed step, and at 1e-6 to
/// tell truncation error from a wrong gradient.
fn unit_gradients() -> Vec<(&'static str, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = 1e-2;
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var| {
        out.push((name, gradcheck(inputs, f), gradcheck_with_step(inputs, f, 1e-6)));
    };
    let x = random(&mut rng, &[6, 4], s);
    let y = random(&mut rng, &[6, 4], s);
    let w = random(&mut rng, &[4, 3], s);
    let p64 = random(&mut rng, &[6, 4], 1.0);
    let p63 = random(&mut rng, &[6, 3], 1.0);

    check("matmul", &[x.clone(), w], &|t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        project(t, c, &p63)
    });
    check("add", &[x.clone(), y.clone()], &|t, v| {
        let c = t.add(v[0], v[1]).unwrap();
        project(t, c, &p64)
    });
    check("sub", &[x.clone(), y.clone()], &|t, v| {
        let c = t.sub(v[0], v[1]).unwrap();
        project(t, c, &p64)
    });
    check("mul", &[x.clone(), y.clone()], &|t, v| {
        let c = t.mul(v[0], v[1]).unwrap();
        project(t, c, &p64)
    });
    check("scale", &[x.clone()], &|t, v| {
        let c = t.scale(v[0], -2.5);
        project(t, c, &p64)
    });
    let bias = random(&mut rng, &[4], s);
    check("add_tiled", &[x.clone(), bias], &|t, v| {
        let c = t.add_tiled(v[0], v[1]).unwrap();
        project(t, c, &p64)
    });
    check("sum", &[x.clone()], &|t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        t.sum(sq)
    });
    check("mse", &[x.clone(), y.clone()], &|t, v| t.mse(v[0], v[1]).unwrap());
    check("softmax_lastdim", &[x.clone()], &|t, v| {
        let c = t.softmax_lastdim(v[0]);
        project(t, c, &p64)
    });
    let gamma = random(&mut rng, &[4], 1.0);
    let beta = random(&mut rng, &[4], s);
    check("layer_norm", &[x.clone(), gamma, beta], &|t, v| {
        let c = t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        project(t, c, &p64)
    });
    check("gelu", &[x.clone()], &|t, v| {
        let c = t.gelu(v[0]);
        project(t, c, &p64)
    });
    let p24 = random(&mut rng, &[2, 4], 1.0);
    check("mean_pool", &[x.clone()], &|t, v| {
        let c = t.mean_pool(v[0], 2).unwrap();
        project(t, c, &p24)
    });
    // batch 2, tokens 3, heads 2, head dim 2
    let q = random(&mut rng, &[6, 4], s);
    let k = random(&mut rng, &[6, 4], s);
    check("split/merge heads, batch_matmul", &[q, k, x.clone()], &|t, v| {
        let qh = t.split_heads(v[0], 2, 3, 2).unwrap();
        let kh = t.split_heads(v[1], 2, 3, 2).unwrap();
        let vh = t.split_heads(v[2], 2, 3, 2).unwrap();
        let scores = t.batch_matmul(qh, kh, true).unwrap();
        let probs = t.softmax_lastdim(scores);
        let ctx = t.batch_matmul(probs, vh, false).unwrap();
        let merged = t.merge_heads(ctx, 2, 2).unwrap();
        project(t, merged, &p64)
    });
    let logits = random(&mut rng, &[3, 4], s);
    check("cross_entropy", &[logits], &|t, v| t.cross_entropy(v[0], &[0, 3, 1]).unwrap());
    check("weighted_sum", &[x.clone(), y], &|t, v| {
        let a = t.sum(v[0]);
        let b = t.mse(v[0], v[1]).unwrap();
        t.weighted_sum(&[(a, 0.3), (b, 2.0)]).unwrap()
    });
    out
}

fn backward_examples() -> Result<(), String> {
    let mut t = Tape::new();
    let w = t.param(Tensor::vector(&[3.0]));
    let zero = t.constant(Tensor::vector(&[0.0]));
    let loss = ok(t.mse(w, zero))?;
    let g = ok(t.backward(loss))?;
    ensure(g.wrt(w).unwrap().data() == [6.0], || "d mse(w, 0)/dw at 3 is not 6".into())?;

    let mut t = Tape::new();
    let w = t.param(Tensor::vector(&[1.0, 2.0]));
    let other = t.param(Tensor::vector(&[5.0]));
    let sq = ok(t.mul(w, w))?;
    let loss = t.sum(sq);
    let g = ok(t.backward(loss))?;
    ensure(g.wrt(w).unwrap().data() == [2.0, 4.0], || "d sum(w·w)/dw is not 2w".into())?;
    ensure(g.wrt(other).unwrap().data() == [0.0], || "unreachable leaf has nonzero gradient".into())?;

    // Straight-through: unit gradient inside the representable range, zero outside.
    let qp = ok(calibrate(&Tensor::vector(&[-1.0, 1.0]), 4))?;
    let (lo, hi) = qp.range(0);
    let mut t = Tape::new();
    let p = t.param(Tensor::vector(&[lo - 0.5, 0.3, -0.7, hi + 0.5]));
    let y = ok(fake_quant_var(&mut t, p, &qp))?;
    let loss = t.sum(y);
    let g = ok(t.backward(loss))?;
    ensure(g.wrt(p).unwrap().data() == [0.0, 1.0, 1.0, 0.0], || "straight-through mask wrong".into())?;

    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(&[1.0]));
    let y = t.gelu(x);
    let gelu1 = t.value(y).data()[0];
    let expected = Normal::new(0.0, 1.0).unwrap().cdf(1.0);
    ensure((gelu1 - expected).abs() < 1e-9 && (gelu1 - 0.841345).abs() < 1e-6, || {
        format!("gelu(1) = {gelu1}, Φ(1) = {expected}")
    })?;
    Ok(())
}

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 2,
        embed_dim: 8,
        heads: 2,
        blocks: 3,
        mlp_hidden: 12,
        classes: 4,
        pos_embed: true,
        ln_eps: 1e-6,
        bits: BitWidths::default(),
    }
}

fn random_images(rng: &mut ChaCha8Rng, config: &ModelConfig, n: usize) -> Tensor {
    let [c, h, w] = config.image_shape();
    random(rng, &[n, c, h, w], 1.0)
}

/// Fused block loss gradient against central differences, with rounding
/// replayed from the unperturbed pass so perturbations stay in their bins.
fn end_to_end_gradient() -> Result<f64, String> {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fp = ok(ViTModel::init(&config, &mut rng))?;
    let calib = random_images(&mut rng, &config, 12);
    let q = ok(quantize_model(&fp, &[calib.clone()], QuantizeOptions::default()))?;
    let l = 1;
    let cache = ok(BlockCache::new(&fp, &q, l, &calib))?;
    let batch = ok(cache.batch(&[0, 3, 5, 8]))?;
    let (alpha, beta) = (0.7, 1.3);

    let mut tape = Tape::recording();
    let objective = ok(BlockObjective::build(&mut tape, &q, l, &batch, true))?;
    let (loss, _) = ok(objective.fuse(&mut tape, Components::ALL, alpha, beta))?;
    let grads = ok(tape.backward(loss))?;
    let memo = tape.take_memo();
    let analytic = grads.wrt(objective.bound.fc1.weight).unwrap().data().to_vec();

    let value_at = |idx: usize, delta: f64| -> (f64, f64) {
        let mut m = q.clone();
        let w = &mut m.blocks[l].fc1.weight;
        let mut t = w.tensor().clone();
        t.data_mut()[idx] += delta;
        w.assign(t).unwrap();
        let actual = w.tensor().data()[idx];
        let mut replay = Tape::replaying(memo.clone());
        let objective = BlockObjective::build(&mut replay, &m, l, &batch, true).unwrap();
        let (_, b) = objective.fuse(&mut replay, Components::ALL, alpha, beta).unwrap();
        (b.fused, actual)
    };
    let picks: Vec<usize> = (0..8).map(|_| rng.gen_range(0..analytic.len())).collect();
    let mut a = Vec::new();
    let mut n = Vec::new();
    for idx in picks {
        let (up, x_up) = value_at(idx, 1e-3);
        let (down, x_down) = value_at(idx, -1e-3);
        n.push((up - down) / (x_up - x_down));
        a.push(analytic[idx]);
    }
    let diff = a.iter().zip(&n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(diff / norm)
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    backward_examples()?;
    let unit = unit_gradients();
    let worst = unit.iter().cloned().fold(("", 0.0, 0.0), |w, u| if u.1 > w.1 { u } else { w });
    let failures: Vec<String> = unit
        .iter()
        .filter(|u| u.1 > 1e-4)
        .map(|(name, err, fine)| format!("{name}: relative error {err:.2e} > 1e-4 ({fine:.1e} at step 1e-6)"))
        .collect();
    let e2e = end_to_end_gradient()?;
    let elapsed = started.elapsed();
    let summary = format!(
        "{} primitives, worst {:.1e} ({}), end-to-end {:.1e}, {:.2}s",
        unit.len(),
        worst.1,
        worst.0,
        e2e,
        elapsed.as_secs_f64()
    );
    ensure(failures.is_empty(), || format!("{}; {summary}", failures.join("; ")))?;
    ensure(e2e <= 1e-3, || format!("end-to-end block loss: relative error {e2e:.2e} > 1e-3; {summary}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(summary)
}

// ---- criterion 3 ------------------------------------------------------------

/// A model whose weight columns span [-1, 0.5] on the 2-bit grid and its
/// weight-only 2-bit quantized twin, which computes the identical function.
fn grid_aligned_pair() -> (ViTModel, ViTModel, Tensor) {
    let config = ModelConfig {
        bits: BitWidths::uniform(2),
        ..small_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fp = ViTModel::init(&config, &mut rng).unwrap();
    let grid = [-1.0, -0.5, 0.0, 0.5];
    let names: Vec<String> = fp.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(fp.params_mut()) {
        if !(name.ends_with(".weight") || name == "pos") {
            continue;
        }
        let (rows, cols) = (p.shape()[0], p.shape()[1]);
        let data = (0..rows * cols)
            .map(|i| match i / cols {
                0 => -1.0,
                1 => 0.5,
                _ => grid[rng.gen_range(0..4)],
            })
            .collect();
        p.assign(Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
    }
    let calib = random_images(&mut rng, &config, 6);
    let options = QuantizeOptions {
        bits: config.bits,
        activations: false,
    };
    let q = quantize_model(&fp, &[], options).unwrap();
    (fp, q, calib)
}

fn loss_identity_suite() -> Outcome {
    let (fp, q, calib) = grid_aligned_pair();
    let trace = ok(fp.trace(&calib))?;
    ensure(ok(ebgs_loss(&fp, &q, &calib))? == 0.0, || "ebgs nonzero for identical models".into())?;
    for l in 0..fp.blocks.len() {
        let m = trace.block_input(l);
        ensure(ok(obwr_loss(&fp, &q, l, m))? == 0.0, || format!("obwr nonzero in block {l}"))?;
        ensure(ok(block_ibls_loss(&fp, &q, l, m))? == 0.0, || format!("ibls nonzero in block {l}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (o, e, i) = (rng.gen_range(0.0..1e3), rng.gen_range(0.0..1e3), rng.gen_range(0.0..1e3));
        let b = ok(fuse_losses(o, e, i, 0.0, 0.0))?;
        ensure(b.fused.to_bits() == o.to_bits(), || format!("fuse with α=β=0 gave {} for obwr {o}", b.fused))?;
    }
    let ibls = ok(ibls_loss(
        &[Tensor::vector(&[0.0, 0.0]), Tensor::vector(&[0.0])],
        &[Tensor::vector(&[2.0, 0.0]), Tensor::vector(&[2.0])],
    ))?;
    ensure(ibls == 3.0, || format!("IBLS of layer MSEs {{2, 4}} is {ibls}"))?;
    Ok(format!("zero losses on {} blocks, α=β=0 bit-exact, IBLS{{2,4}} = 3", fp.blocks.len()))
}

// ---- criterion 4 ------------------------------------------------------------

fn f32_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn scope_suite(fp: &ViTModel, train: &Dataset) -> Outcome {
    let calib = ok(ok(sample_calibration(train, 64, 0))?.all())?;
    let config = ReconstructionConfig {
        iterations: 20,
        calibration_size: 64,
        ..ReconstructionConfig::default()
    };
    let q = ok(run_mgrq(
        fp,
        &calib,
        &ReconstructionConfig {
            components: Components::NONE,
            ..config.clone()
        },
    ))?
    .model;
    for l in 0..q.blocks.len() {
        let mut updated = q.clone();
        ok(reconstruct_block(l, fp, &mut updated, &calib, &config))?;
        let prefix = format!("blocks.{l}.");
        let mut changed = 0;
        for ((name, a), (_, b)) in q.named_params().into_iter().zip(updated.named_params()) {
            let same = f32_bytes(a.tensor()) == f32_bytes(b.tensor());
            if name.starts_with(&prefix) {
                changed += usize::from(!same);
            } else {
                ensure(same, || format!("reconstructing block {l} changed {name}"))?;
            }
        }
        ensure(changed > 0, || format!("reconstructing block {l} changed nothing"))?;
        let mut restored = updated.clone();
        restored.blocks[l] = q.blocks[l].clone();
        ensure(checkpoint_bytes(&restored) == checkpoint_bytes(&q), || {
            format!("checkpoint bytes outside block {l} differ")
        })?;
    }
    let a = ok(run_mgrq(fp, &calib, &config))?;
    let b = ok(run_mgrq(fp, &calib, &config))?;
    let (ca, cb) = (checksum(&a.model), checksum(&b.model));
    ensure(ca == cb, || format!("run_mgrq checksums differ: {ca} vs {cb}"))?;
    Ok(format!("{} blocks scoped, run_mgrq checksum {}", q.blocks.len(), &ca[..16]))
}

// ---- criteria 5 and 6 -------------------------------------------------------

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy_fp.mgrq")
}

fn load_fixture(train: &Dataset) -> mgrq_core::Result<ViTModel> {
    let path = fixture_path();
    match load_checkpoint(&path) {
        Err(Error::MissingFile(_)) => {
            eprintln!("fixture missing; training it ({})", path.display());
            let model = train_toy_fp(train, &TrainConfig::default())?;
            save_checkpoint(&model, &path)?;
            Ok(model)
        }
        other => other,
    }
}

fn table_two(fp: &ViTModel, train: &Dataset, test: &Dataset) -> Result<(AblationReport, Duration, f64), String> {
    let config = ReconstructionConfig::default();
    let fp_top1 = ok(evaluate_top1(fp, test))?;
    let started = Instant::now();
    let calibration = ok(sample_calibration(train, config.calibration_size, config.seed))?;
    let report = ok(run_ablation(fp, &calibration, test, &config))?;
    Ok((report, started.elapsed(), fp_top1))
}

fn ablation_criterion(report: &AblationReport, elapsed: Duration, fp_top1: f64, fixture_sum: &str) -> Outcome {
    ensure(fixture_sum == FIXTURE_CHECKSUM, || {
        format!("fixture checksum {fixture_sum} differs from the pinned one")
    })?;
    ensure(fp_top1 >= 0.90, || format!("fixture top-1 {:.1}% below 90%", 100.0 * fp_top1))?;
    let top = |arm: &str| report.row(arm).map(|r| r.top1).unwrap_or(f64::NAN);
    let (base, obwr, ebgs, both, full) = (top("baseline"), top("obwr"), top("ebgs"), top("obwr+ebgs"), top("mgrq"));
    let pts = |x: f64| 100.0 * x;
    let summary = format!(
        "fp {:.1} | baseline {:.1}, obwr {:.1}, ebgs {:.1}, ibls {:.1}, obwr+ebgs {:.1}, mgrq {:.1} | {:.0}s",
        pts(fp_top1),
        pts(base),
        pts(obwr),
        pts(ebgs),
        pts(top("ibls")),
        pts(both),
        pts(full),
        elapsed.as_secs_f64()
    );
    let measured: Vec<f64> = report.rows[1..].iter().map(|r| r.top1).collect();
    let pinned = (fp_top1 - FIXTURE_TOP1).abs() < 5e-4
        && measured.iter().zip(PINNED_ARMS).all(|(m, p)| (m - p).abs() < 5e-4);
    let summary = if pinned { summary } else { format!("{summary} (differs from pinned fp {FIXTURE_TOP1}, arms {PINNED_ARMS:?})") };

    let chain = [base, obwr, both, full];
    let ordered = chain.windows(2).all(|w| w[1] >= w[0] || pts(w[0] - w[1]) <= 0.5);
    let margin = pts(full - base);
    ensure(ordered, || format!("{summary}; ordering baseline ≤ obwr ≤ obwr+ebgs ≤ mgrq violated"))?;
    ensure(ebgs < obwr, || format!("{summary}; EBGS-only does not trail OBWR-only"))?;
    ensure(margin >= 2.0, || format!("{summary}; mgrq − baseline = {margin:.1} pt < 2 pt"))?;
    ensure(elapsed < Duration::from_secs(15 * 60), || format!("{summary}; ablation exceeded 15 minutes"))?;
    Ok(format!("{summary}; mgrq − baseline = {margin:.1} pt"))
}

fn decrease_criterion(log: &LossLog, blocks: usize) -> Outcome {
    let mut ratios = Vec::new();
    for l in 0..blocks {
        let fused: Vec<f64> = log.block(l).map(|r| r.loss.fused).collect();
        let k = (fused.len() / 10).max(1);
        ensure(fused.len() >= 10, || format!("block {l}: only {} iterations logged", fused.len()))?;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&fused[..k]), mean(&fused[fused.len() - k..]));
        ensure(last <= first, || format!("block {l}: final-10% mean {last:.4e} > first-10% mean {first:.4e}"))?;
        ratios.push(format!("{:.2}", last / first));
    }
    Ok(format!("final/first fused loss per block: [{}]", ratios.join(", ")))
}

// ---- criterion 7 ------------------------------------------------------------

/// The `mgrq` binary next to this test's build output, rebuilt if stale.
fn cli_binary() -> Result<PathBuf, String> {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let profile_dir = exe
        .parent()
        .and_then(Path::parent)
        .ok_or("cannot locate the target directory")?;
    let bin = profile_dir.join(format!("mgrq{}", std::env::consts::EXE_SUFFIX));
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let mut cmd = Command::new(cargo);
    cmd.args(["build", "-q", "-p", "mgrq-cli", "--bin", "mgrq"]);
    if profile_dir.ends_with("release") {
        cmd.arg("--release");
    }
    let status = cmd.status().map_err(|e| e.to_string())?;
    ensure(status.success() && bin.exists(), || "could not build the mgrq binary".into())?;
    Ok(bin)
}

fn exit_codes() -> Result<String, String> {
    let bin = cli_binary()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (name, n, split) in [("train.bin", 16, Split::Train), ("test.bin", 8, Split::Test)] {
        let images = (0..n * 3 * 16 * 16).map(|_| rng.gen()).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let d = ok(Dataset::new([3, 16, 16], 4, split, images, labels))?;
        ok(d.save(dir.path().join(name)))?;
    }
    let data = dir.path().to_str().unwrap();
    let ckpt = dir.path().join("fp.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let cases: [(&[&str], i32); 5] = [
        (&["train-fp", "--epochs", "1", "--batch", "8", "--dataset", data, "--checkpoint-out", ckpt], 0),
        (&["eval", "--dataset", data, "--checkpoint-in", ckpt], 0),
        (&["no-such-command"], 1),
        (&["eval", "--checkpoint-in", missing.to_str().unwrap()], 2),
        (&["train-fp", "--train-lr", "inf", "--batch", "8", "--dataset", data, "--checkpoint-out", ckpt], 3),
    ];
    let mut seen = Vec::new();
    for (args, expected) in cases {
        let out = Command::new(&bin)
            .args(args)
            .env("RUST_LOG", "error")
            .output()
            .map_err(|e| e.to_string())?;
        let code = out.status.code().unwrap_or(-1);
        ensure(code == expected, || format!("`mgrq {}` exited {code}, expected {expected}", args.join(" ")))?;
        seen.push(code.to_string());
    }
    Ok(seen.join("/"))
}

fn harness_suite(fp: &ViTModel, report: Option<&AblationReport>) -> Outcome {
    let bytes = checkpoint_bytes(fp);
    let back = ok(checkpoint_from_bytes(&bytes))?;
    ensure(checkpoint_bytes(&back) == bytes, || "checkpoint save→load→save not byte-identical".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = random_images(&mut rng, &fp.config, 16);
    let (a, b) = (ok(fp.forward(&inputs))?, ok(back.forward(&inputs))?);
    ensure(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), || {
        "reloaded model's forward differs".into()
    })?;

    let d = ok(Dataset::new([1, 2, 2], 3, Split::Train, (0..12).collect(), vec![0, 2, 1]))?;
    let raw = d.to_bytes();
    let mut magic = raw.clone();
    magic[0] = b'X';
    ensure(matches!(Dataset::from_bytes(&magic), Err(Error::BadMagic { .. })), || "bad magic not reported".into())?;
    ensure(matches!(Dataset::from_bytes(&raw[..raw.len() - 1]), Err(Error::Truncated { .. })), || {
        "truncation not reported".into()
    })?;

    let codes = exit_codes()?;

    let report = report.ok_or("no ablation report (criterion 5 did not run)")?;
    ensure(report.rows.len() == 1 + ARMS.len() && report.rows[0].components.is_none(), || {
        format!("report has {} rows", report.rows.len())
    })?;
    Ok(format!("checkpoint bit-exact, dataset errors typed, exit codes {codes}, report 6 arms + fp row"))
}

// ---- runner -----------------------------------------------------------------

fn line(n: usize, name: &str, started: Instant, outcome: &Outcome) {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("criterion {n} [{name}]: PASS ({detail}) [{secs:.1}s]"),
        Err(why) => println!("criterion {n} [{name}]: FAIL ({why}) [{secs:.1}s]"),
    }
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let outcome = f();
        line(n, name, started, &outcome);
        results.push(outcome.is_ok());
    };

    run(1, "quantizer contract", &mut quantizer_suite);
    run(2, "gradients", &mut gradient_suite);
    run(3, "loss identities", &mut loss_identity_suite);

    let fixture = bundled().and_then(|(train, test)| Ok((load_fixture(&train)?, train, test)));
    let (fp, train, test) = match fixture {
        Ok(f) => f,
        Err(e) => {
            for (n, name) in [(4, "algorithm scope"), (5, "ablation"), (6, "loss decrease"), (7, "harness")] {
                run(n, name, &mut || Err(format!("fixture unavailable: {e}")));
            }
            return ExitCode::FAILURE;
        }
    };
    run(4, "algorithm scope", &mut || scope_suite(&fp, &train));

    let fixture_sum = checksum(&fp);
    let ablation = table_two(&fp, &train, &test);
    run(5, "ablation", &mut || match &ablation {
        Ok((report, elapsed, fp_top1)) => ablation_criterion(report, *elapsed, *fp_top1, &fixture_sum),
        Err(e) => Err(e.clone()),
    });
    run(6, "loss decrease", &mut || match &ablation {
        Ok((report, ..)) => {
            let mgrq = ARMS.iter().position(|a| a.components == Components::ALL).unwrap();
            decrease_criterion(&report.logs[mgrq + 1], fp.blocks.len())
        }
        Err(e) => Err(e.clone()),
    });
    let report = ablation.as_ref().ok().map(|(r, ..)| r);
    run(7, "harness", &mut || harness_suite(&fp, report));

    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
