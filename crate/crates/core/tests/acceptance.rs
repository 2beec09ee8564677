//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rcs_core::cs::{Physics, SamplingOperator};
use rcs_core::data::{synthetic_image, Dataset};
use rcs_core::metrics::{psnr, ssim};
use rcs_core::sampler::{Couplings, Framework, FrameworkConfig};
use rcs_core::tensor::{CacheMode, LayerFn, ParamSet, Real, Tape, Tensor, Var};
use rcs_core::train::{activate, grad_equivalence_audit, log_csv, memory_sweep, train, TrainOutcome};
use rcs_core::{EstimatorConfig, InitMode, Model, Rng, TrainConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn random<R: Real>(shape: &[usize], rng: &mut Rng) -> Tensor<R> {
    Tensor::from_fn(shape, |_| rng.normal::<R>())
}

fn small_model_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 3,
        patch: 16,
        block: 4,
        ratio: 0.5,
        channels: [4, 8],
        blocks_per_group: 1,
        expansion: 1,
        framework_mode: CacheMode::Cached,
        seed,
        ..Default::default()
    }
}

/// A wired framework with every weight active and a random schedule.
fn random_model<R: Real>(seed: u64, init: InitMode) -> Model<R> {
    let mut model = Model::<R>::new(&TrainConfig { init, ..small_model_config(seed) }).unwrap();
    let mut rng = Rng::derive(seed, "acceptance-weights");
    activate(&mut model, &mut rng, None).unwrap();
    let alphas: Vec<f64> = (0..model.framework.steps()).map(|_| rng.range(0.3, 0.95)).collect();
    model.framework.schedule().set_alphas(&mut model.params, &alphas).unwrap();
    model
}

fn round_trip_error<R: Real>(seed: u64) -> f64 {
    let model = random_model::<R>(seed, InitMode::BackProjection);
    let mut rng = Rng::derive(seed, "acceptance-pair");
    let op = model.operator().unwrap();
    let phys = Physics::of_image(&op, &synthetic_image(&mut rng, 16).cast::<R>()).unwrap();
    let v = (0..3).map(|_| rng.range(0.05, 0.95)).collect();
    let c = Couplings { v, w_t: 1.0, w_0: 0.0 };
    let (x, h) = (random::<R>(&[1, 16, 16], &mut rng), random::<R>(&[1, 16, 16], &mut rng));
    let (x0, h0) = model.framework.forward_pair(&model.params, &phys, &c, &x, &h).unwrap();
    let (xt, ht) = model.framework.inverse_pair(&model.params, &phys, &c, &x0, &h0).unwrap();
    xt.max_abs_diff(&x).max(ht.max_abs_diff(&h))
}

fn criterion_1() -> Verdict {
    let e32 = (0..100).map(round_trip_error::<f32>).fold(0.0, f64::max);
    let e64 = (0..100).map(round_trip_error::<f64>).fold(0.0, f64::max);
    verdict(
        e32 < 1e-4 && e64 < 1e-10,
        format!("100 wired T=3 frameworks, v in [0.05, 0.95]: max error f32 {e32:.3e} (< 1e-4), f64 {e64:.3e} (< 1e-10)"),
    )
}

/// Max relative deviation between tape gradients and central differences of
/// `Σ w ⊙ f(inputs)` for fixed random `w`.
fn fd_check<'a>(params: &'a ParamSet<f64>, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<'a, f64>, &[Var<f64>]) -> Var<f64>) -> f64 {
    let loss = |tape: &mut Tape<'a, f64>, vars: &[Var<f64>]| {
        let out = f(tape, vars);
        let mut rng = Rng::new(99);
        let w = tape.constant_vec(out.shape().to_vec(), rng.normal_vec(out.numel()));
        let p = tape.mul(&out, &w).unwrap();
        tape.sum(&p).unwrap()
    };
    let mut tape = Tape::new(params);
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.input(t)).collect();
    let l = loss(&mut tape, &vars);
    let grads = tape.backward(&l).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.input(v).map_or(vec![0.0; v.numel()], <[f64]>::to_vec)).collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::no_grad(params);
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.constant(t)).collect();
        loss(&mut tape, &vars).item()
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[k][i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
        }
    }
    worst
}

/// Values at least 0.2 away from zero, so kinks stay out of reach of `h`.
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.range(0.2, 1.5);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.range(0.3, 2.0))
}

fn primitive_fd_errors() -> Vec<(&'static str, f64)> {
    let params = ParamSet::<f64>::new();
    let mut rng = Rng::new(5);
    let p = &params;
    let (a, b) = (random::<f64>(&[2, 3], &mut rng), random::<f64>(&[2, 3], &mut rng));
    let s = Tensor::scalar(0.7);
    let az = away_from_zero(&[2, 3], &mut rng);
    let pos = positive(&[2, 3], &mut rng);
    let img = random::<f64>(&[2, 6, 6], &mut rng);
    let kernel = random::<f64>(&[3, 2, 3, 3], &mut rng);
    let bias = random::<f64>(&[3], &mut rng);
    let feat = random::<f64>(&[4, 3, 3], &mut rng);
    let (m1, m2) = (random::<f64>(&[3, 4], &mut rng), random::<f64>(&[4, 2], &mut rng));
    let op = SamplingOperator::build(4, 0.5, 8).unwrap();
    let x_true = random::<f64>(&[1, 8, 8], &mut rng);
    let phys = Physics::of_image(&op, &x_true).unwrap();
    let x8 = random::<f64>(&[1, 8, 8], &mut rng);
    let y = random::<f64>(&[op.measurement_len(&[1, 8, 8]).unwrap()], &mut rng);
    let l1_gap = Tensor::from_fn(&[2, 3], |i| a.data()[i] + az.data()[i]);

    let mut out = vec![
        ("add", fd_check(p, &[a.clone(), b.clone()], |t, v| t.add(&v[0], &v[1]).unwrap())),
        ("sub", fd_check(p, &[a.clone(), b.clone()], |t, v| t.sub(&v[0], &v[1]).unwrap())),
        ("mul", fd_check(p, &[a.clone(), b.clone()], |t, v| t.mul(&v[0], &v[1]).unwrap())),
        ("scale", fd_check(p, &[a.clone(), s.clone()], |t, v| t.scale(&v[0], &v[1]).unwrap())),
        ("affine", fd_check(p, &[a.clone()], |t, v| t.affine(&v[0], -1.5, 0.25).unwrap())),
        ("relu", fd_check(p, &[az.clone()], |t, v| t.relu(&v[0]).unwrap())),
        ("sigmoid", fd_check(p, &[a.clone()], |t, v| t.sigmoid(&v[0]).unwrap())),
        ("sqrt", fd_check(p, &[pos.clone()], |t, v| t.sqrt(&v[0]).unwrap())),
        ("recip", fd_check(p, &[pos.clone()], |t, v| t.recip(&v[0]).unwrap())),
        ("sum", fd_check(p, &[a.clone()], |t, v| t.sum(&v[0]).unwrap())),
        ("mean", fd_check(p, &[a.clone()], |t, v| t.mean(&v[0]).unwrap())),
        ("sq_sum", fd_check(p, &[a.clone()], |t, v| t.sq_sum(&v[0]).unwrap())),
        ("l1_mean", fd_check(p, &[l1_gap, a.clone()], |t, v| t.l1_mean(&v[0], &v[1]).unwrap())),
        ("mse", fd_check(p, &[a.clone(), b.clone()], |t, v| t.mse(&v[0], &v[1]).unwrap())),
        ("reshape", fd_check(p, &[a.clone()], |t, v| t.reshape(&v[0], &[3, 2]).unwrap())),
        ("concat", fd_check(p, &[img.clone(), img.clone()], |t, v| t.concat(&[&v[0], &v[1]]).unwrap())),
        ("matmul", fd_check(p, &[m1, m2], |t, v| t.matmul(&v[0], &v[1]).unwrap())),
        ("conv2d", fd_check(p, &[img.clone(), kernel.clone(), bias.clone()], |t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), 1).unwrap())),
        ("conv2d_stride2", fd_check(p, &[img.clone(), kernel.clone()], |t, v| t.conv2d(&v[0], &v[1], None, 2).unwrap())),
        ("pixel_shuffle", fd_check(p, &[feat.clone()], |t, v| t.pixel_shuffle(&v[0], 2).unwrap())),
        ("pixel_unshuffle", fd_check(p, &[img.clone()], |t, v| t.pixel_unshuffle(&v[0], 2).unwrap())),
        ("upsample2", fd_check(p, &[feat.clone()], |t, v| t.upsample2(&v[0]).unwrap())),
        ("measure", fd_check(p, &[x8.clone()], |t, v| t.measure(&op, &v[0]).unwrap())),
        ("back_project", fd_check(p, &[y], |t, v| t.back_project(&op, &v[0], &[1, 8, 8]).unwrap())),
        ("gram", fd_check(p, &[x8.clone()], |t, v| t.gram(&op, &v[0]).unwrap())),
        ("rnd_project", fd_check(p, &[x8.clone()], |t, v| t.rnd_project(&phys, &v[0]).unwrap())),
    ];
    for mode in [CacheMode::Cached, CacheMode::Recompute] {
        let name = if mode == CacheMode::Cached { "wired_chain_cached" } else { "wired_chain_recompute" };
        let args = [a.clone(), Tensor::scalar(0.9), Tensor::scalar(0.3), Tensor::scalar(0.6), Tensor::scalar(0.2)];
        out.push((
            name,
            fd_check(p, &args, move |t, v| {
                let layers: Vec<LayerFn<'_, f64>> = vec![
                    Box::new(|t, x| {
                        let s = t.sigmoid(x)?;
                        t.mul(&s, x)
                    }),
                    Box::new(|t, x| {
                        let q = t.mul(x, x)?;
                        t.affine(&q, 0.5, -0.1)
                    }),
                ];
                t.wired_chain(&v[0], &v[1], &v[2], &[v[3].clone(), v[4].clone()], layers, mode).unwrap()
            }),
        ));
    }
    out
}

fn criterion_2() -> Verdict {
    let cfg = TrainConfig { steps: 3, precision: rcs_core::Precision::F64, ..small_model_config(3) };
    let audit = grad_equivalence_audit::<f64>(&cfg, Some(0.5)).unwrap();
    let inj = audit.group("injectors").map_or(f64::NAN, |g| g.max_rel);
    let inj_live = audit.group("injectors").is_some_and(|g| g.max_abs_grad > 0.0);
    let fd = primitive_fd_errors();
    let (worst_op, worst) = fd.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    verdict(
        audit.max_rel() < 1e-10 && inj_live && inj < 1e-10 && worst < 1e-5,
        format!(
            "recompute vs cached, T=3 with injectors: max rel {:.3e} (injectors {inj:.3e}) (< 1e-10); finite differences over {} ops: worst {worst:.3e} on {worst_op} (< 1e-5)",
            audit.max_rel(),
            fd.len()
        ),
    )
}

fn criterion_3() -> Verdict {
    let cfg = TrainConfig { steps: 1, ..Default::default() };
    let sweep = memory_sweep::<f32>(&cfg, &[1, 2, 4, 8, 12]).unwrap();
    let (_, slope, r2) = sweep.cached_fit();
    let spread = sweep.recompute_spread();
    let last = sweep.rows.last().unwrap();
    let step_red = sweep.step_reduction_pct(last);
    let monotone = sweep.rows.windows(2).all(|w| w[1].reduction_pct() >= w[0].reduction_pct());
    let t1 = sweep.rows[0].cached_peak_bytes as f64 / sweep.rows[0].recompute_peak_bytes as f64;
    let table: Vec<String> = sweep
        .rows
        .iter()
        .map(|r| format!("T={}: {}/{} B", r.steps, r.cached_peak_bytes, r.recompute_peak_bytes))
        .collect();
    verdict(
        r2 > 0.99 && slope > 0.0 && spread < 0.05 && step_red >= 90.0,
        format!(
            "cached fit R² {r2:.5} slope {slope:.0} B/step; recompute spread {:.2}%; step-proportional reduction at T=12 {step_red:.2}% (total {:.2}%); monotone {monotone}; T=1 ratio {t1:.3}; [{}]",
            100.0 * spread,
            last.reduction_pct(),
            table.join(", ")
        ),
    )
}

fn criterion_4(trained: &Model<f32>) -> Verdict {
    let mut worst = 0.0f64;
    let mut projections = 0;
    let mut probe = |model: &Model<f32>, img: &Tensor<f32>, op: &SamplingOperator| {
        let phys = Physics::of_image(op, img).unwrap();
        model.framework.reconstruct(&model.params, &phys, Some(&mut model.inference_rng())).unwrap();
        worst = worst.max(phys.worst_residual());
        projections += phys.projection_count();
    };
    for seed in 0..10 {
        for init in [InitMode::BackProjection, InitMode::Noise] {
            let model = random_model::<f32>(seed, init);
            let op = model.operator().unwrap();
            probe(&model, &synthetic_image(&mut Rng::new(seed), 16), &op);
        }
    }
    let op = trained.operator().unwrap();
    for img in Dataset::synthetic(64).held_out(1, 8) {
        probe(trained, &img, &op);
    }
    for ratio in [0.1, 0.5] {
        let op = SamplingOperator::build(8, ratio, 4).unwrap();
        probe(trained, &synthetic_image(&mut Rng::new(77), 64), &op);
    }
    verdict(
        worst < 1e-5,
        format!("max ‖A·x̄ − y‖∞ over {projections} projections at 32-bit: {worst:.3e} (< 1e-5)"),
    )
}

fn degenerate_gap<R: Real>(seed: u64) -> f64 {
    let estimator = EstimatorConfig { channels: [4, 8], blocks_per_group: 1, expansion: 1, invertible: false, ..Default::default() };
    let build = |invertible| {
        let cfg = FrameworkConfig { steps: 3, invertible, mode: CacheMode::Cached, init: InitMode::BackProjection, estimator: estimator.clone() };
        let mut params = ParamSet::<R>::new();
        let fw = Framework::new(&mut params, cfg, &mut Rng::new(seed)).unwrap();
        let mut rng = Rng::derive(seed, "degenerate");
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id);
            if name.starts_with("est.out") || name.contains(".inj.c2") {
                for v in params.get_mut(id).data_mut() {
                    *v = R::lit(0.1 * rng.normal::<f64>());
                }
            }
        }
        fw.schedule().set_alphas(&mut params, &[0.9, 0.6, 0.4]).unwrap();
        (fw, params)
    };
    let (wired, wp) = build(true);
    let (plain, pp) = build(false);
    let op = SamplingOperator::build(4, 0.5, seed).unwrap();
    let phys = Physics::of_image(&op, &synthetic_image(&mut Rng::new(seed), 16).cast::<R>()).unwrap();
    let mut tape = Tape::no_grad(&wp);
    let x_t = wired.initial(&mut tape, &phys, None).unwrap();
    let a = wired.run_from(&mut tape, &phys, &x_t, Some(&Couplings::degenerate(3))).unwrap().to_tensor();
    let b = plain.reconstruct(&pp, &phys, None).unwrap();
    a.max_abs_diff(&b)
}

fn criterion_5() -> Verdict {
    let g32 = (0..10).map(degenerate_gap::<f32>).fold(0.0, f64::max);
    let g64 = (0..10).map(degenerate_gap::<f64>).fold(0.0, f64::max);
    verdict(g32 < 1e-6 && g64 < 1e-6, format!("(u, v) = (1, 0), w_0 = 0 vs unwired over 10 frameworks: max gap f32 {g32:.3e}, f64 {g64:.3e} (< 1e-6)"))
}

fn criterion_6() -> Verdict {
    let op = SamplingOperator::build(8, 0.25, 0).unwrap();
    let (o64, o32) = (op.orthonormality_error::<f64>(), op.orthonormality_error::<f32>());

    let op4 = SamplingOperator::build(4, 0.5, 1).unwrap();
    let (m, n) = (op4.m_blk(), op4.n_blk());
    let a = DMatrix::from_row_slice(m, n, op4.matrix::<f64>());
    let pinv = a.clone().pseudo_inverse(1e-12).unwrap();
    let mut rng = Rng::new(2);
    let x = random::<f64>(&[1, 8, 8], &mut rng);
    let y = op4.sample(&x).unwrap();
    let mut worst = 0.0f64;
    for prec in [false, true] {
        let got: Vec<f64> = if prec {
            op4.back_project(&y.cast::<f32>()).unwrap().data().iter().map(|&v| v as f64).collect()
        } else {
            op4.back_project(&y).unwrap().into_data()
        };
        for (tile, (ty, tx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let yt = DMatrix::from_column_slice(m, 1, &y.values()[tile * m..(tile + 1) * m]);
            let want = &pinv * yt;
            for r in 0..4 {
                for c in 0..4 {
                    let idx = (ty * 4 + r) * 8 + tx * 4 + c;
                    worst = worst.max((got[idx] - want[r * 4 + c]).abs());
                }
            }
        }
    }
    verdict(
        o64 < 1e-6 && o32 < 1e-6 && worst < 1e-5,
        format!("B=8 γ=0.25: max |A·Aᵀ − I| f64 {o64:.3e}, f32 {o32:.3e} (< 1e-6); B=4 γ=0.5 back-projection vs SVD pseudo-inverse: {worst:.3e} (< 1e-5)"),
    )
}

fn toy(injectors: bool, init: InitMode) -> TrainConfig {
    TrainConfig {
        steps: 2,
        patch: 64,
        block: 8,
        ratio: 0.25,
        iterations: 2000,
        seed: 0,
        batch: 4,
        lr: 1e-3,
        lr_halving: 1000,
        channels: [8, 16],
        expansion: 2,
        blocks_per_group: 1,
        framework_mode: CacheMode::Cached,
        eval_every: 0,
        eval_images: 8,
        injectors,
        init,
        ..Default::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_7(with: &TrainOutcome<f32>, without: &TrainOutcome<f32>, minutes: f64) -> Verdict {
    let gain = with.final_psnr - with.baseline_psnr;
    let inj = with.final_psnr - without.final_psnr;
    let losses: Vec<f64> = with.log.iter().map(|r| r.loss).collect();
    let (early, late) = (median(losses[..500].to_vec()), median(losses[1500..].to_vec()));
    verdict(
        gain >= 3.0 && inj >= 0.3 && minutes < 30.0,
        format!(
            "baseline A†y {:.3} dB; with injectors {:.3} dB (+{gain:.3}, need ≥ 3); without {:.3} dB (margin {inj:.3}, need ≥ 0.3); median loss {early:.4} → {late:.4}; both runs {minutes:.1} min (< 30)",
            with.baseline_psnr, with.final_psnr, without.final_psnr
        ),
    )
}

fn criterion_8(backproj: &TrainOutcome<f32>, noise: &TrainOutcome<f32>) -> Verdict {
    let margin = backproj.final_psnr - noise.final_psnr;
    verdict(
        margin > 0.0,
        format!("back-projection init {:.3} dB vs noise init {:.3} dB: margin {margin:.3} dB (> 0)", backproj.final_psnr, noise.final_psnr),
    )
}

fn criterion_9(trained: &Model<f32>) -> Verdict {
    let cfg = TrainConfig { iterations: 25, ..toy(true, InitMode::Noise) };
    let ds = Dataset::synthetic(64);
    let a = log_csv(&train::<f32>(&cfg, &ds, |_| {}).unwrap().log);
    let b = log_csv(&train::<f32>(&cfg, &ds, |_| {}).unwrap().log);
    let op = trained.operator().unwrap();
    let y = op.sample(&synthetic_image(&mut Rng::new(31), 64)).unwrap();
    let bits = |t: Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let r1 = bits(trained.reconstruct(&op, &y, &mut trained.inference_rng()).unwrap());
    let r2 = bits(trained.reconstruct(&op, &y, &mut trained.inference_rng()).unwrap());
    let noise_model = Model::<f32>::new(&cfg).unwrap();
    let n1 = bits(noise_model.reconstruct(&op, &y, &mut noise_model.inference_rng()).unwrap());
    let n2 = bits(noise_model.reconstruct(&op, &y, &mut noise_model.inference_rng()).unwrap());
    verdict(
        a == b && r1 == r2 && n1 == n2,
        format!(
            "train logs identical: {} ({} lines); reconstruct identical: trained {}, noise init {}",
            a == b,
            a.lines().count(),
            r1 == r2,
            n1 == n2
        ),
    )
}

fn criterion_10() -> Verdict {
    let mut rng = Rng::new(6);
    let x = Tensor::from_fn(&[1, 32, 32], |_| rng.range(0.2, 0.8));
    let mut rng = Rng::new(7);
    let off = Tensor::from_fn(&[1, 32, 32], |i| x.data()[i] + if rng.uniform() < 0.5 { 0.1 } else { -0.1 });
    let db = psnr(&off, &x, 1.0).unwrap();
    let sx = ssim(&x, &x).unwrap();
    let x8 = synthetic_image(&mut Rng::new(8), 48);
    let s8 = ssim(&x8, &x8).unwrap();
    verdict(
        (db - 20.0).abs() <= 0.01 && sx == 1.0 && s8 == 1.0,
        format!("PSNR of a uniform 0.1 error {db:.6} dB (20 ± 0.01); SSIM(x, x) = {sx} and {s8} (exactly 1)"),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, start: Instant, v: Verdict| {
        let secs = start.elapsed().as_secs_f64();
        let budget = match n {
            1 => Some(60.0),
            2 | 3 => Some(300.0),
            _ => None,
        };
        let pass = v.pass && budget.is_none_or(|b| secs < b);
        let tag = if pass { "PASS" } else { "FAIL" };
        failures += usize::from(!pass);
        let limit = budget.map_or(String::new(), |b| format!(", limit {b:.0}s"));
        println!("criterion {n:>2} [{tag}] {name}: {} ({secs:.1}s{limit})", v.detail);
    };

    let t = Instant::now();
    report(1, "invertibility round-trip", t, criterion_1());
    let t = Instant::now();
    report(2, "gradient equivalence", t, criterion_2());
    let t = Instant::now();
    report(3, "memory scaling", t, criterion_3());

    let t = Instant::now();
    let ds = Dataset::synthetic(64);
    let with = train::<f32>(&toy(true, InitMode::BackProjection), &ds, |_| {}).unwrap();
    let with_minutes = t.elapsed().as_secs_f64() / 60.0;

    let t = Instant::now();
    report(4, "measurement consistency", t, criterion_4(&with.model));
    let t = Instant::now();
    report(5, "degenerate wiring equivalence", t, criterion_5());
    let t = Instant::now();
    report(6, "operator correctness", t, criterion_6());

    let t = Instant::now();
    let without = train::<f32>(&toy(false, InitMode::BackProjection), &ds, |_| {}).unwrap();
    let minutes = with_minutes + t.elapsed().as_secs_f64() / 60.0;
    report(7, "desk-scale training benefit", t, criterion_7(&with, &without, minutes));

    let t = Instant::now();
    let noise = train::<f32>(&toy(true, InitMode::Noise), &ds, |_| {}).unwrap();
    report(8, "initialization ablation", t, criterion_8(&with, &noise));
    let t = Instant::now();
    report(9, "determinism", t, criterion_9(&with.model));
    let t = Instant::now();
    report(10, "metric sanity", t, criterion_10());

    println!("{}/10 criteria passed", 10 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
