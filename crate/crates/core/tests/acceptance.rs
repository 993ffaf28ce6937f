//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned here.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::{
    blob_dataset, brute_edt, metric_fixtures, oracle_e_curve, oracle_regions, oracle_s, oracle_wf, param_check,
    rand_tensor, random_mask, weighted_sum,
};
use gapnet::dataio::{decode_checkpoint, encode_checkpoint, parse_config_str, parse_flo, Preset, RunConfig};
use gapnet::error::Error;
use gapnet::gapblocks::{Csa, CsaConfig, Gfe, Gpc, GpcConfig};
use gapnet::labels::{decompose, edt_squared, BinaryMask, DecomposeParams, Region, RegionTargets};
use gapnet::losses::{bce, dice, overall_loss, Supervision};
use gapnet::metrics::{e_curve, f_weighted, s_measure, score_image, MetricOptions, F_BETA2};
use gapnet::model::{count_macs, count_params, fuse_low_video, ForwardOptions, Gapnet, Mode, ModelConfig, SITES};
use gapnet::params::{init_rng, Builder, Ctx, ParamStore};
use gapnet::pipeline::{Sample, TrainOptions, Trainer};
use gapnet_tensor::nn::{self, Conv2dOptions};
use gapnet_tensor::{grad_check, grad_check_many, GradCheckConfig, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const MODEL_GRAD_TOL: f64 = 1e-3;
const MODEL_GRAD_PROBES: usize = 32;
/// Central-difference steps: single blocks, and the full model whose loss
/// sums many pixels and so carries more rounding noise.
const BLOCK_STEP: f64 = 1e-5;
const MODEL_STEP: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const EDT_CASES: usize = 200;
const METRIC_TOL: f64 = 1e-6;
const PARAM_BAND: (usize, usize) = (1_790_000, 2_190_000);
const REF_MACS: f64 = 1.26e9;
const MAC_BAND: f64 = 0.25;
const CSA_REF: f64 = 65_000.0;
const GPC_REF: f64 = 20_000.0;
const SITE_BAND: f64 = 0.30;
const PROFILE_BUDGET: Duration = Duration::from_secs(10);
const OVERFIT_MAE: f64 = 0.05;
const OVERFIT_STEPS: usize = 500;
const OVERFIT_BUDGET: Duration = Duration::from_secs(180);
/// Smoothing window (in steps, one step per epoch) for the decreasing-loss check.
const LOSS_WINDOW: usize = 50;
const LOSS_GAP: f64 = 1e-6;
const VIDEO_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn report(n: usize, name: &str, outcome: &Outcome) {
    let line = match outcome {
        Ok(d) => format!("criterion {n:>2} PASS  {name}: {d}\n"),
        Err(d) => format!("criterion {n:>2} FAIL  {name}: {d}\n"),
    };
    let mut out = std::io::stdout();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn check_input(name: &str, r: gapnet_tensor::Result<gapnet_tensor::GradCheckReport>, worst: &mut f64) -> Result<(), String> {
    let r = r.map_err(|e| format!("{name}: {e}"))?;
    *worst = worst.max(r.max_rel_err);
    ensure(r.passed(), || format!("{name}: max rel err {:.2e}", r.max_rel_err))
}

/// Random values bounded away from zero so ReLU kinks are not probed.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn primitive_checks(worst: &mut f64) -> Result<usize, String> {
    let cfg = GradCheckConfig::default().tol(GRAD_TOL);
    let mut n = 0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape);
        let (a, b, c) = (r(&[2, 3, 4]), r(&[2, 3, 4]), r(&[4]));
        let cases: Vec<(&str, gapnet_tensor::Result<_>)> = vec![
            (
                "add/sub/mul/scale",
                grad_check_many(
                    |v| weighted_sum(&v[0].mul(&v[1])?.add(&v[2])?.sub(&v[1])?.scale(1.7)?, seed),
                    &[a.clone(), b.clone(), c.clone()],
                    &cfg,
                ),
            ),
            ("sigmoid", grad_check(|v| weighted_sum(&v.sigmoid()?, seed), &a, &cfg)),
            ("softmax", grad_check(|v| weighted_sum(&v.softmax()?, seed), &a, &cfg)),
            (
                "matmul",
                grad_check_many(|v| weighted_sum(&v[0].matmul(&v[1])?, seed), &[a.clone(), r(&[2, 4, 5])], &cfg),
            ),
            (
                "matmul shared",
                grad_check_many(|v| weighted_sum(&v[0].matmul(&v[1])?, seed), &[a.clone(), r(&[4, 2])], &cfg),
            ),
            (
                "reshape/permute/transpose",
                grad_check(
                    |v| weighted_sum(&v.reshape(&[3, 2, 4])?.permute(&[2, 0, 1])?.transpose_last()?, seed),
                    &a,
                    &cfg,
                ),
            ),
            (
                "concat/split/narrow",
                grad_check_many(
                    |v| {
                        let cat = Var::concat(&[&v[0], &v[1]], 2)?;
                        let parts = cat.split(&[3, 5], 2)?;
                        weighted_sum(&parts[1].narrow(1, 1, 2)?, seed)?.add(&weighted_sum(&parts[0], seed + 1)?)
                    },
                    &[a.clone(), b.clone()],
                    &cfg,
                ),
            ),
            (
                "sum/mean",
                grad_check(|v| weighted_sum(&v.sum(&[1])?, seed)?.add(&weighted_sum(&v.mean(&[0, 2])?, seed + 1)?), &a, &cfg),
            ),
            ("mean_all", grad_check(|v| v.mean_all(), &a, &cfg)),
            (
                "linear",
                grad_check_many(|v| weighted_sum(&nn::linear(&v[0], &v[1], Some(&v[2]))?, seed), &[a.clone(), r(&[4, 6]), r(&[6])], &cfg),
            ),
            (
                "layer_norm",
                grad_check_many(|v| weighted_sum(&nn::layer_norm(&v[0], &v[1], &v[2], 1e-5)?, seed), &[a.clone(), r(&[4]), r(&[4])], &cfg),
            ),
        ];
        for (name, res) in cases {
            check_input(name, res, worst)?;
            n += 1;
        }
        let relu_in = off_kink(&mut rng, &[2, 3, 4]);
        check_input("relu", grad_check(|v| weighted_sum(&v.relu()?, seed), &relu_in, &cfg), worst)?;
        n += 1;

        let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape);
        let x = r(&[2, 4, 6, 5]);
        let convs = [
            (Conv2dOptions::default().padding(1), 4, 3),
            (Conv2dOptions::default().padding(2).dilation(2), 3, 3),
            (Conv2dOptions::default().stride(2).padding(1), 5, 3),
            (Conv2dOptions::default().padding(1).groups(4), 4, 3),
            (Conv2dOptions::default(), 6, 1),
        ];
        for (opt, cout, k) in convs {
            let w = r(&[cout, 4 / opt.groups, k, k]);
            let bias = r(&[cout]);
            check_input(
                "conv2d",
                grad_check_many(|v| weighted_sum(&nn::conv2d(&v[0], &v[1], Some(&v[2]), &opt)?, seed), &[x.clone(), w, bias], &cfg),
                worst,
            )?;
            n += 1;
        }
        let (g, be) = (r(&[4]), r(&[4]));
        check_input(
            "batch_norm train",
            grad_check_many(|v| weighted_sum(&nn::batch_norm2d_train(&v[0], &v[1], &v[2], 1e-5)?.0, seed), &[x.clone(), g.clone(), be.clone()], &cfg),
            worst,
        )?;
        let rm = r(&[4]);
        let rv = r(&[4]).map(|v| v.abs() + 0.5);
        check_input(
            "batch_norm eval",
            grad_check_many(|v| weighted_sum(&nn::batch_norm2d_eval(&v[0], &v[1], &v[2], &rm, &rv, 1e-5)?, seed), &[x.clone(), g, be], &cfg),
            worst,
        )?;
        check_input("adaptive_avg_pool", grad_check(|v| weighted_sum(&nn::adaptive_avg_pool2d(v, 3)?, seed), &x, &cfg), worst)?;
        check_input("upsample_bilinear", grad_check(|v| weighted_sum(&nn::upsample_bilinear(v, (11, 9))?, seed), &x, &cfg), worst)?;
        check_input("resize_bilinear", grad_check(|v| weighted_sum(&nn::resize_bilinear2d(v, (4, 3))?, seed), &x, &cfg), worst)?;
        check_input(
            "tokens",
            grad_check(|v| weighted_sum(&nn::from_tokens(&nn::to_tokens(v)?.scale(2.0)?, 6, 5)?, seed), &x, &cfg),
            worst,
        )?;
        n += 6;
        let p = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.random_range(0.05..0.95));
        let gt = Tensor::from_fn(&[2, 1, 3, 3], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        check_input("bce", grad_check(|v| Ok(bce(v, &gt)?), &p, &cfg), worst)?;
        check_input("dice", grad_check(|v| Ok(dice(v, &gt)?), &p, &cfg), worst)?;
        n += 2;
    }
    Ok(n)
}

fn build<B>(seed: u64, f: impl FnOnce(&mut Builder<'_, f64>) -> B) -> (B, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    let block = f(&mut Builder::new(&mut store, &mut rng));
    (block, store)
}

fn block_checks(worst: &mut f64) -> Result<(), String> {
    let cfg = GradCheckConfig::default().tol(GRAD_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let gcfg = GpcConfig { m: 3, ..GpcConfig::new(16) };
    let (gpc, store) = build(1, |b| Gpc::new(b, &gcfg).unwrap());
    let x = rand_tensor(&mut rng, &[2, 16, 8, 8]);
    check_input(
        "gpc",
        grad_check(|v| weighted_sum(&gpc.forward(&Ctx::with_tape(&store, v.tape(), false), v)?, 1), &x, &cfg),
        worst,
    )?;
    let xv = Var::constant(x);
    let e = param_check(&store, |ctx| Ok(weighted_sum(&gpc.forward(ctx, &xv)?, 1)?), 24, BLOCK_STEP);
    *worst = worst.max(e);
    ensure(e < GRAD_TOL, || format!("gpc params: {e:.2e}"))?;

    let (csa, store) = build(2, |b| Csa::new(b, 8, 12, CsaConfig::new(16)).unwrap());
    let (f, c) = (rand_tensor(&mut rng, &[2, 8, 4, 6]), rand_tensor(&mut rng, &[2, 12, 2, 3]));
    check_input(
        "csa",
        grad_check_many(
            |v| weighted_sum(&csa.forward(&Ctx::with_tape(&store, v[0].tape(), false), &v[0], &v[1])?.0, 2),
            &[f.clone(), c.clone()],
            &cfg,
        ),
        worst,
    )?;
    let (fv, cv) = (Var::constant(f), Var::constant(c));
    let e = param_check(&store, |ctx| Ok(weighted_sum(&csa.forward(ctx, &fv, &cv)?.0, 2)?), 16, BLOCK_STEP);
    *worst = worst.max(e);
    ensure(e < GRAD_TOL, || format!("csa params: {e:.2e}"))?;

    let (gfe, store) = build(3, |b| Gfe::new(b, 8, 2, 2).unwrap());
    let x = rand_tensor(&mut rng, &[2, 8, 3, 3]);
    check_input(
        "gfe",
        grad_check(|v| weighted_sum(&gfe.forward(&Ctx::with_tape(&store, v.tape(), false), v)?, 3), &x, &cfg),
        worst,
    )?;
    let xv = Var::constant(x);
    let e = param_check(&store, |ctx| Ok(weighted_sum(&gfe.forward(ctx, &xv)?, 3)?), 16, BLOCK_STEP);
    *worst = worst.max(e);
    ensure(e < GRAD_TOL, || format!("gfe params: {e:.2e}"))
}

/// Toy model from image to overall loss, probed on 32 parameters.
fn model_check() -> Result<f64, String> {
    let cfg = ModelConfig::toy();
    let (model, store) = Gapnet::build::<f64>(&cfg, 11).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = Var::constant(rand_tensor(&mut rng, &[2, 3, 32, 32]));
    let masks: Vec<RegionTargets> = (0..2)
        .map(|i| RegionTargets::new(&BinaryMask::from_fn(32, 32, |r, c| (r as i64 - 12 - 4 * i).pow(2) + (c as i64 - 16).pow(2) < 100)).unwrap())
        .collect();
    let opts = ForwardOptions {
        aux_heads: true,
        bypass_flow: false,
    };
    let err = param_check(
        &store,
        |ctx| Ok(overall_loss(&model.forward_image(ctx, &img, opts)?, &masks, Supervision::B)?.overall),
        MODEL_GRAD_PROBES,
        MODEL_STEP,
    );
    ensure(err < MODEL_GRAD_TOL, || format!("full model: max rel err {err:.2e}"))?;
    Ok(err)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0;
    let n = primitive_checks(&mut worst)?;
    block_checks(&mut worst)?;
    let model = model_check()?;
    let el = t0.elapsed();
    ensure(el < GRAD_BUDGET, || format!("took {el:?}"))?;
    Ok(format!(
        "{n} primitive checks + GPC/CSA/GFE, worst rel err {worst:.1e} (< {GRAD_TOL:e}); toy model {MODEL_GRAD_PROBES} params {model:.1e} (< {MODEL_GRAD_TOL:e}); {:.1}s",
        el.as_secs_f64()
    ))
}

fn bit_identical(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = Var::constant(rand_tensor(&mut rng, &[2, 16, 8, 8]));
    for attention in [true, false] {
        let cfg = GpcConfig {
            m: 4,
            attention,
            ..GpcConfig::new(16)
        };
        let (gpc, mut store) = build(21, |b| Gpc::new(b, &cfg).unwrap());
        store.zero_learned("");
        let y = gpc.forward(&Ctx::inference(&store), &x).map_err(|e| e.to_string())?;
        ensure(bit_identical(y.value(), x.value()), || format!("gpc (attention={attention}) is not an identity"))?;
    }
    let (gfe, mut store) = build(22, |b| Gfe::new(b, 16, 1, 4).unwrap());
    store.zero_learned("");
    let y = gfe.forward(&Ctx::inference(&store), &x).map_err(|e| e.to_string())?;
    ensure(bit_identical(y.value(), x.value()), || "gfe is not an identity".into())?;

    let (model, mut store) = Gapnet::build::<f64>(&ModelConfig::paper(), 23).map_err(|e| e.to_string())?;
    store.zero_learned("");
    let ctx = Ctx::inference(&store);
    let mut blocks = 0;
    for blk in model.backbone.stages.iter().flatten().filter(|b| b.residual) {
        let c = store.get(blk.project.conv.weight).shape()[0];
        let x = Var::constant(rand_tensor(&mut rng, &[1, c, 6, 6]));
        let y = blk.forward(&ctx, &x).map_err(|e| e.to_string())?;
        ensure(bit_identical(y.value(), x.value()), || format!("backbone block with {c} channels is not an identity"))?;
        blocks += 1;
    }
    ensure(blocks > 0, || "no residual-eligible backbone block".into())?;
    Ok(format!("GPC (with and without attention), GFE and {blocks} backbone blocks reproduce inputs bit-exactly"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut fg_total = 0;
    for case in 0..EDT_CASES {
        let m = random_mask(&mut rng, 32, 32);
        let d = edt_squared(&m).map_err(|e| e.to_string())?;
        ensure(d == brute_edt(&m), || format!("edt differs from brute force on case {case}"))?;
        let l = decompose(&m, DecomposeParams::default()).map_err(|e| e.to_string())?;
        ensure(l.region == oracle_regions(&m), || format!("decompose differs from oracle on case {case}"))?;
        let parts: usize = [Region::Boundary, Region::Center, Region::Others].iter().map(|&r| l.mask(r).count()).sum();
        let disjoint_cover = m.bits().iter().zip(&l.region).all(|(&b, &r)| b == (r != Region::Background));
        ensure(parts == m.count() && disjoint_cover, || format!("regions do not partition the foreground on case {case}"))?;
        fg_total += m.count();
    }
    Ok(format!("{EDT_CASES} random 32x32 masks ({fg_total} foreground px): EDT exact, regions match oracle and partition"))
}

fn criterion_4() -> Outcome {
    let fixtures = metric_fixtures();
    for (name, _, g) in &fixtures {
        let p: Vec<f64> = g.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let s = score_image(&p, g, MetricOptions::default()).map_err(|e| e.to_string())?;
        let vals = [s.f_max, s.f_weighted, s.s_measure, s.e_max, s.e_mean];
        ensure(s.mae.abs() < METRIC_TOL && vals.iter().all(|v| (v.unwrap_or(0.0) - 1.0).abs() < METRIC_TOL), || {
            format!("identity on {name}: {s:?}")
        })?;
    }
    let mut worst = 0.0f64;
    for (name, p, g) in &fixtures {
        let wf = f_weighted(p, g, 1.0).map_err(|e| e.to_string())?.unwrap_or(f64::NAN);
        let d_wf = (wf - oracle_wf(p, g, 1.0)).abs();
        let d_s = (s_measure(p, g).map_err(|e| e.to_string())? - oracle_s(p, g)).abs();
        let e = e_curve(p, g).map_err(|e| e.to_string())?;
        let d_e = e.iter().zip(oracle_e_curve(p, g)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let d = d_wf.max(d_s).max(d_e);
        ensure(d < METRIC_TOL, || format!("{name}: wF {d_wf:.1e}, S {d_s:.1e}, E {d_e:.1e}"))?;
        worst = worst.max(d);
    }
    ensure(F_BETA2 == 0.3, || format!("F uses beta2 {F_BETA2}"))?;
    Ok(format!(
        "identity = (0,1,1,1,1,1) on {n} fixtures; wF/S/E oracles agree on {n} fixtures (max diff {worst:.1e}); F beta2 = {F_BETA2}",
        n = fixtures.len()
    ))
}

fn within(v: f64, reference: f64, band: f64) -> bool {
    (v / reference - 1.0).abs() <= band
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let (model, store) = Gapnet::build::<f32>(&ModelConfig::paper(), 0).map_err(|e| e.to_string())?;
    let params = count_params(&store);
    let macs = count_macs(&model, &store, (384, 384)).map_err(|e| e.to_string())?;
    let el = t0.elapsed();
    ensure((PARAM_BAND.0..=PARAM_BAND.1).contains(&params.total), || format!("total params {}", params.total))?;
    let m = macs.total() as f64;
    ensure(within(m, REF_MACS, MAC_BAND), || format!("MACs {m:.3e} outside ±25% of {REF_MACS:e}"))?;
    let mut sites = Vec::new();
    for s in SITES {
        let n = params.sites[s] as f64;
        let reference = if s.contains("csa") { CSA_REF } else { GPC_REF };
        ensure(within(n, reference, SITE_BAND), || format!("{s}: {n} params vs {reference}"))?;
        sites.push(format!("{}={}", s.trim_start_matches("decoder."), params.sites[s]));
    }
    ensure(el < PROFILE_BUDGET, || format!("profile took {el:?}"))?;
    Ok(format!(
        "params {} in [1.79M, 2.19M]; MACs {:.3}G ({:+.1}% vs 1.26G); sites {}; {:.2}s",
        params.total,
        m / 1e9,
        (m / REF_MACS - 1.0) * 100.0,
        sites.join(" "),
        el.as_secs_f64()
    ))
}

fn criterion_6() -> Outcome {
    let (model, store) = Gapnet::build::<f32>(&ModelConfig::paper(), 0).map_err(|e| e.to_string())?;
    let img = Var::constant(Tensor::zeros(&[1, 3, 384, 384]));
    let out = model
        .forward_image(&Ctx::inference(&store), &img, ForwardOptions::default())
        .map_err(|e| e.to_string())?;
    let t = &out.csa[0];
    ensure(t.q_len == 720 && t.kv_len == 144, || format!("csa_high tokens q={} kv={}", t.q_len, t.kv_len))?;
    ensure(t.kv_len * 5 == t.q_len, || "K/V is not one fifth of Q".into())?;
    ensure(t.attention_shape[2..] == [720, 144], || format!("attention extent {:?}", t.attention_shape))?;
    Ok(format!(
        "Q {} tokens, K/V {} tokens (ratio 1/{}), attention matrix {:?}",
        t.q_len,
        t.kv_len,
        t.q_len / t.kv_len,
        t.attention_shape
    ))
}

fn overfit_run(samples: &[Sample]) -> Result<(Trainer, Vec<f64>, Duration), String> {
    let run = RunConfig {
        preset: Preset::Toy,
        batch_size: 8,
        epochs: OVERFIT_STEPS,
        train_sizes: vec![64],
        infer_size: 64,
        lr: 3e-3,
        weight_decay: 0.0,
        seed: 7,
        ..RunConfig::default()
    };
    let mut opts = TrainOptions::new(run).map_err(|e| e.to_string())?;
    opts.flip = false;
    let mut trainer = Trainer::new(opts).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let manifest = trainer.fit(samples, |_, _| Ok(())).map_err(|e| e.to_string())?;
    Ok((trainer, manifest.losses, t0.elapsed()))
}

fn criterion_7() -> Outcome {
    let samples: Vec<Sample> = blob_dataset(70)
        .into_iter()
        .map(|(image, mask)| Sample { image, mask, flow: None })
        .collect();
    let (trainer, losses, el) = overfit_run(&samples)?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let preds = trainer.predictor(64).predict_batch(&images).map_err(|e| e.to_string())?;
    let mae = preds
        .iter()
        .zip(&samples)
        .map(|(p, s)| gapnet::metrics::mae(&p.p3, &s.mask).unwrap())
        .sum::<f64>()
        / samples.len() as f64;
    let (_, again, _) = overfit_run(&samples)?;
    let same = losses.len() == again.len() && losses.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits());
    let windows: Vec<f64> = losses[2..].chunks(LOSS_WINDOW).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    let smooth = windows.windows(2).all(|w| w[1] <= w[0]);
    let detail = format!(
        "{} steps in {:.1}s, loss {:.3} -> {:.4}, training MAE {mae:.4}, rerun bit-exact: {same}, {LOSS_WINDOW}-step means non-increasing: {smooth}",
        losses.len(),
        el.as_secs_f64(),
        losses[0],
        losses[losses.len() - 1]
    );
    ensure(mae < OVERFIT_MAE && losses.len() <= OVERFIT_STEPS && el < OVERFIT_BUDGET && same && smooth, || detail.clone())?;
    Ok(detail)
}

fn criterion_8() -> Outcome {
    let cfg = ModelConfig::toy();
    let (model, store) = Gapnet::build::<f64>(&cfg, 80).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let img = Var::constant(rand_tensor(&mut rng, &[2, 3, 64, 64]));
    let targets: Vec<RegionTargets> = (0..2)
        .map(|i| RegionTargets::new(&BinaryMask::from_fn(64, 64, |r, c| (r as i64 - 30 - 4 * i).pow(2) + (c as i64 - 28).pow(2) < 400)).unwrap())
        .collect();
    let opts = ForwardOptions {
        aux_heads: true,
        bypass_flow: false,
    };
    let out = model.forward_image(&Ctx::inference(&store), &img, opts).map_err(|e| e.to_string())?;
    let mut losses = Vec::new();
    for s in Supervision::ALL {
        let parsed: Supervision = s.to_string().parse().map_err(|e: Error| e.to_string())?;
        ensure(parsed == s, || format!("setting {s} does not round-trip"))?;
        losses.push((s, overall_loss(&out, &targets, s).map_err(|e| e.to_string())?.value()));
    }
    let mut min_gap = f64::INFINITY;
    for i in 0..losses.len() {
        for j in i + 1..losses.len() {
            let gap = (losses[i].1 - losses[j].1).abs();
            min_gap = min_gap.min(gap);
            ensure(gap > LOSS_GAP, || format!("settings {} and {} give {} and {}", losses[i].0, losses[j].0, losses[i].1, losses[j].1))?;
        }
    }
    ensure(Supervision::default() == Supervision::F && RunConfig::default().supervision == Supervision::F, || {
        "default setting is not (f)".into()
    })?;

    let img = Var::constant(rand_tensor(&mut rng, &[1, 3, 128, 128]));
    let mut p3 = Vec::new();
    for m in [1usize, 3, 7, 28] {
        let run = parse_config_str(&format!("preset = toy\ngpc_m = {m}\n")).map_err(|e| e.to_string())?;
        let mc = run.model_config().map_err(|e| e.to_string())?;
        ensure(mc.gpc.m == m, || format!("gpc_m {m} not applied"))?;
        let (model, store) = Gapnet::build::<f64>(&mc, 82).map_err(|e| e.to_string())?;
        let out = model.forward_image(&Ctx::inference(&store), &img, ForwardOptions::default()).map_err(|e| e.to_string())?;
        p3.push(out.p3.into_value());
    }
    let distinct = (0..p3.len()).all(|i| (i + 1..p3.len()).all(|j| p3[i] != p3[j]));
    ensure(distinct, || "pooling sizes give identical outputs".into())?;

    let mut no_attn = ModelConfig::toy();
    no_attn.gpc.attention = false;
    let (model, store) = Gapnet::build::<f64>(&no_attn, 83).map_err(|e| e.to_string())?;
    let full = count_params(&Gapnet::build::<f64>(&ModelConfig::toy(), 83).map_err(|e| e.to_string())?.1).total;
    let reduced = count_params(&store).total;
    ensure(store.id("decoder.gpc_1.block.attn.q.weight").is_none() && reduced < full, || {
        "attention-disabled GPC still carries attention parameters".into()
    })?;
    model.forward_image(&Ctx::inference(&store), &img, ForwardOptions::default()).map_err(|e| e.to_string())?;
    Ok(format!(
        "settings a-f: losses {} (min pairwise gap {min_gap:.2e}), default (f); m in {{1,3,7,28}} run at 128x128; w/o attention {reduced} vs {full} params",
        losses.iter().map(|(s, l)| format!("{s}={l:.4}")).collect::<Vec<_>>().join(" ")
    ))
}

fn criterion_9() -> Outcome {
    let (_, store) = Gapnet::build::<f32>(&ModelConfig::paper(), 90).map_err(|e| e.to_string())?;
    let named = store.named();
    let bytes = encode_checkpoint(&named).map_err(|e| e.to_string())?;
    let back = decode_checkpoint::<f32>(&bytes).map_err(|e| e.to_string())?;
    let exact = named.len() == back.len()
        && named.iter().zip(&back).all(|((n1, t1), (n2, t2))| {
            n1 == n2 && t1.shape() == t2.shape() && t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
    ensure(exact, || "checkpoint round-trip is not bit-exact".into())?;
    let (_, store64) = Gapnet::build::<f64>(&ModelConfig::toy(), 91).map_err(|e| e.to_string())?;
    let n64 = store64.named();
    let back64 = decode_checkpoint::<f64>(&encode_checkpoint(&n64).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(
        n64.iter().zip(&back64).all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())),
        || "f64 checkpoint round-trip is not bit-exact".into(),
    )?;

    // Conformant fixture written by hand: magic, width, height, interleaved (u, v).
    let (w, h) = (3usize, 2usize);
    let mut flo = 202021.25f32.to_le_bytes().to_vec();
    flo.extend((w as i32).to_le_bytes());
    flo.extend((h as i32).to_le_bytes());
    let uv: Vec<f32> = (0..w * h * 2).map(|i| i as f32 * 0.5 - 1.0).collect();
    for v in &uv {
        flo.extend(v.to_le_bytes());
    }
    let path = std::path::Path::new("fixture.flo");
    let f = parse_flo(path, &flo).map_err(|e| e.to_string())?;
    ensure(f.width == w && f.height == h && f.uv == uv, || format!("parsed flow {f:?}"))?;
    let mut bad = flo.clone();
    bad[0] ^= 0x01;
    let magic_err = parse_flo(path, &bad);
    let trunc_err = parse_flo(path, &flo[..flo.len() - 3]);
    ensure(matches!(magic_err, Err(Error::FlowMagic { .. })), || format!("bad magic gave {magic_err:?}"))?;
    ensure(matches!(trunc_err, Err(Error::Truncated { .. })), || format!("truncation gave {trunc_err:?}"))?;
    Ok(format!(
        "{} f32 and {} f64 tensors round-trip bit-exactly; .flo fixture accepted; bad magic -> FlowMagic, truncation -> Truncated",
        named.len(),
        n64.len()
    ))
}

fn criterion_10() -> Outcome {
    let mut vcfg = ModelConfig::toy();
    vcfg.mode = Mode::Video;
    let (video, vstore) = Gapnet::build::<f64>(&vcfg, 100).map_err(|e| e.to_string())?;
    let (image, istore) = Gapnet::build::<f64>(&ModelConfig::toy(), 100).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let rgb = Var::constant(rand_tensor(&mut rng, &[2, 3, 64, 64]));
    let flow = Var::constant(rand_tensor(&mut rng, &[2, 2, 64, 64]));
    let bypass = ForwardOptions {
        aux_heads: false,
        bypass_flow: true,
    };
    let v = video.forward_video(&Ctx::inference(&vstore), &rgb, &flow, bypass).map_err(|e| e.to_string())?;
    let i = image.forward_image(&Ctx::inference(&istore), &rgb, ForwardOptions::default()).map_err(|e| e.to_string())?;
    let diff = v
        .p3
        .value()
        .data()
        .iter()
        .zip(i.p3.value().data())
        .chain(v.p1.value().data().iter().zip(i.p1.value().data()))
        .chain(v.p2.value().data().iter().zip(i.p2.value().data()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(diff <= VIDEO_TOL, || format!("bypassed video differs from image path by {diff:.2e}"))?;
    let full = video.forward_video(&Ctx::inference(&vstore), &rgb, &flow, ForwardOptions::default()).map_err(|e| e.to_string())?;
    ensure(full.p3.value() != v.p3.value(), || "flow stream has no effect".into())?;

    let r = rand_tensor(&mut rng, &[1, 4, 3, 3]);
    let z = fuse_low_video(&Var::constant(r.clone()), &Var::constant(Tensor::zeros(&[1, 4, 3, 3]))).map_err(|e| e.to_string())?;
    let zero_ok = z.value().data().iter().zip(r.data()).all(|(a, b)| (a - 1.5 * b).abs() <= 1e-12);
    ensure(zero_ok, || "flow = 0 does not give 1.5 x rgb".into())?;
    let fl = rand_tensor(&mut rng, &[1, 4, 3, 3]);
    let y = fuse_low_video(&Var::constant(r.clone()), &Var::constant(fl.clone())).map_err(|e| e.to_string())?;
    let closed = y.value().data().iter().zip(r.data().iter().zip(fl.data())).all(|(out, (&a, &b))| {
        let want = a / (1.0 + (-b).exp()) + a + b;
        (out - want).abs() <= 1e-12
    });
    ensure(closed, || "fusion differs from rgb*sigmoid(flow) + rgb + flow".into())?;
    Ok(format!("bypassed video vs image path max diff {diff:.1e} (<= {VIDEO_TOL:e}); fusion closed forms hold"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", criterion_1),
        ("residual identities", criterion_2),
        ("EDT and decomposition oracles", criterion_3),
        ("metric suite", criterion_4),
        ("efficiency at 384x384", criterion_5),
        ("CSA token arithmetic", criterion_6),
        ("overfit and determinism", criterion_7),
        ("ablation wiring", criterion_8),
        ("I/O bit-exactness", criterion_9),
        ("video path", criterion_10),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = f();
        report(i + 1, name, &outcome);
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
