//! Brute-force and transcription oracles shared by the integration tests.
#![allow(dead_code)]

use gapnet::labels::{BinaryMask, Region};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = f64::EPSILON;

/// Blobby random mask: a few discs and rectangles, optionally speckled.
pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    let shapes = rng.random_range(0..4);
    let mut bits = vec![false; w * h];
    for _ in 0..shapes {
        let (cy, cx) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
        let r = rng.random_range(1.0..(w.max(h) as f64 / 2.0).max(1.5));
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= r * 0.6 };
                if inside {
                    bits[y * w + x] = true;
                }
            }
        }
    }
    if rng.random_bool(0.3) {
        for b in bits.iter_mut() {
            if rng.random_bool(0.05) {
                *b = !*b;
            }
        }
    }
    if rng.random_bool(0.05) {
        bits.iter_mut().for_each(|b| *b = true);
    }
    BinaryMask::new(w, h, bits).unwrap()
}

/// Squared distance from every pixel to the nearest background pixel, by
/// exhaustive search; `u64::MAX` when there is no background.
pub fn brute_edt(m: &BinaryMask) -> Vec<u64> {
    let (w, h) = (m.width(), m.height());
    let bg: Vec<(i64, i64)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| !m.get(r, c))
        .map(|(r, c)| (r as i64, c as i64))
        .collect();
    let mut out = vec![0u64; w * h];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = bg
                .iter()
                .map(|&(br, bc)| ((br - r as i64).pow(2) + (bc - c as i64).pow(2)) as u64)
                .min()
                .unwrap_or(u64::MAX);
        }
    }
    out
}

/// Threshold, rank and precedence applied literally.
pub fn oracle_regions(m: &BinaryMask) -> Vec<Region> {
    let d = brute_edt(m);
    let n = m.bits().len();
    let fg: Vec<usize> = (0..n).filter(|&i| m.bits()[i]).collect();
    let take = (fg.len() * 20).div_ceil(100);
    let mut in_top = vec![false; n];
    // Rank by distance, larger first; earlier row-major index wins a tie.
    for &i in &fg {
        let ahead = fg.iter().filter(|&&j| d[j] > d[i] || (d[j] == d[i] && j < i)).count();
        in_top[i] = ahead < take;
    }
    (0..n)
        .map(|i| {
            if !m.bits()[i] {
                Region::Background
            } else if d[i] < 25 {
                Region::Boundary
            } else if in_top[i] {
                Region::Center
            } else {
                Region::Others
            }
        })
        .collect()
}

fn gt(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Prediction in [0, 1] loosely correlated with the mask.
pub fn noisy_prediction(rng: &mut ChaCha8Rng, m: &BinaryMask, noise: f64) -> Vec<f64> {
    m.bits()
        .iter()
        .map(|&b| (gt(b) * (1.0 - noise) + rng.random_range(0.0..noise)).clamp(0.0, 1.0))
        .collect()
}

/// Weighted F-measure transcribed from the reference construction:
/// nearest-foreground error transfer, 7x7 Gaussian (sigma 5) with zero
/// padding, minimum with the raw error on foreground, distance-based
/// background weighting.
pub fn oracle_wf(p: &[f64], m: &BinaryMask, beta2: f64) -> f64 {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let g: Vec<f64> = m.bits().iter().map(|&b| gt(b)).collect();
    let e: Vec<f64> = p.iter().zip(&g).map(|(a, b)| (a - b).abs()).collect();
    let fg: Vec<(i64, i64)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| g[(r * w + c) as usize] == 1.0).collect();
    // Nearest foreground pixel: smallest distance, then smallest column, then smallest row.
    let mut et = e.clone();
    let mut dist = vec![0.0; e.len()];
    for r in 0..h {
        for c in 0..w {
            let i = (r * w + c) as usize;
            if g[i] == 1.0 {
                continue;
            }
            let best = fg
                .iter()
                .min_by_key(|&&(fr, fc)| ((fr - r).pow(2) + (fc - c).pow(2), fc, fr))
                .unwrap();
            et[i] = e[(best.0 * w + best.1) as usize];
            dist[i] = (((best.0 - r).pow(2) + (best.1 - c).pow(2)) as f64).sqrt();
        }
    }
    let mut k = [[0.0f64; 7]; 7];
    for (a, row) in k.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (y, x) = (a as f64 - 3.0, b as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
        }
    }
    let max = k.iter().flatten().cloned().fold(0.0, f64::max);
    for v in k.iter_mut().flatten() {
        if *v < EPS * max {
            *v = 0.0;
        }
    }
    let sum: f64 = k.iter().flatten().sum();
    let mut padded = vec![0.0; ((h + 6) * (w + 6)) as usize];
    for r in 0..h {
        for c in 0..w {
            padded[((r + 3) * (w + 6) + c + 3) as usize] = et[(r * w + c) as usize];
        }
    }
    let mut ew = vec![0.0; e.len()];
    for r in 0..h {
        for c in 0..w {
            let i = (r * w + c) as usize;
            let mut ea = 0.0;
            for a in 0..7 {
                for b in 0..7 {
                    ea += k[a as usize][b as usize] / sum * padded[((r + a) * (w + 6) + c + b) as usize];
                }
            }
            // MIN_E_EA: the blurred error replaces E only on foreground, where smaller.
            if g[i] == 0.0 || e[i] < ea {
                ea = e[i];
            }
            let weight = if g[i] == 1.0 { 1.0 } else { 2.0 - (0.5f64.ln() / 5.0 * dist[i]).exp() };
            ew[i] = ea * weight;
        }
    }
    let n_fg: f64 = g.iter().sum();
    let ew_fg: f64 = ew.iter().zip(&g).filter(|(_, &gv)| gv == 1.0).map(|(v, _)| v).sum();
    let fpw: f64 = ew.iter().zip(&g).filter(|(_, &gv)| gv == 0.0).map(|(v, _)| v).sum();
    let tpw = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let pr = tpw / (tpw + fpw + EPS);
    (1.0 + beta2) * r * pr / (r + beta2 * pr + EPS)
}

fn std_ddof1(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// S-measure transcribed from the reference implementation.
pub fn oracle_s(p: &[f64], m: &BinaryMask) -> f64 {
    let (w, h) = (m.width(), m.height());
    let g: Vec<f64> = m.bits().iter().map(|&b| gt(b)).collect();
    let y = g.iter().sum::<f64>() / g.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    if y == 0.0 {
        return 1.0 - mean(p);
    }
    if y == 1.0 {
        return mean(p);
    }
    let s_object = |vals: Vec<f64>| {
        let x = mean(&vals);
        2.0 * x / (x * x + 1.0 + std_ddof1(&vals) + EPS)
    };
    let fg_vals: Vec<f64> = p.iter().zip(&g).filter(|(_, &gv)| gv == 1.0).map(|(&v, _)| v).collect();
    let bg_vals: Vec<f64> = p.iter().zip(&g).filter(|(_, &gv)| gv == 0.0).map(|(&v, _)| 1.0 - v).collect();
    let object = y * s_object(fg_vals) + (1.0 - y) * s_object(bg_vals);

    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if g[r * w + c] == 1.0 {
                sr += r as f64;
                sc += c as f64;
                n += 1.0;
            }
        }
    }
    let cx = (sc / n).round_ties_even() as usize + 1;
    let cy = (sr / n).round_ties_even() as usize + 1;
    let area = (w * h) as f64;
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut pv = Vec::new();
        let mut gv = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                pv.push(p[r * w + c]);
                gv.push(g[r * w + c]);
            }
        }
        (pv, gv)
    };
    let ssim = |(pv, gv): (Vec<f64>, Vec<f64>)| {
        if pv.is_empty() {
            return 0.0;
        }
        let nn = pv.len() as f64;
        let (x, yy) = (mean(&pv), mean(&gv));
        let d = (nn - 1.0).max(1.0);
        let sx = pv.iter().map(|v| (v - x).powi(2)).sum::<f64>() / d;
        let sy = gv.iter().map(|v| (v - yy).powi(2)).sum::<f64>() / d;
        let sxy = pv.iter().zip(&gv).map(|(a, b)| (a - x) * (b - yy)).sum::<f64>() / d;
        let alpha = 4.0 * x * yy * sxy;
        let beta = (x * x + yy * yy) * (sx + sy);
        if alpha != 0.0 {
            alpha / (beta + EPS)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let w1 = (cx * cy) as f64 / area;
    let w2 = (cy * (w - cx)) as f64 / area;
    let w3 = ((h - cy) * cx) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let region = w1 * ssim(block(0, cy, 0, cx))
        + w2 * ssim(block(0, cy, cx, w))
        + w3 * ssim(block(cy, h, 0, cx))
        + w4 * ssim(block(cy, h, cx, w));
    (0.5 * object + 0.5 * region).clamp(0.0, 1.0)
}

/// E-measure curve: per threshold `(k+1)/256`, the per-pixel enhanced
/// alignment matrix averaged over all pixels.
pub fn oracle_e_curve(p: &[f64], m: &BinaryMask) -> Vec<f64> {
    let g: Vec<f64> = m.bits().iter().map(|&b| gt(b)).collect();
    let n = g.len() as f64;
    let mg = g.iter().sum::<f64>() / n;
    (0..256)
        .map(|k| {
            let t = (k + 1) as f64 / 256.0;
            let b: Vec<f64> = p.iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect();
            let enhanced: Vec<f64> = if mg == 0.0 {
                b.iter().map(|v| 1.0 - v).collect()
            } else if mg == 1.0 {
                b.clone()
            } else {
                let mp = b.iter().sum::<f64>() / n;
                b.iter()
                    .zip(&g)
                    .map(|(pv, gv)| {
                        let (a, c) = (gv - mg, pv - mp);
                        let xi = 2.0 * a * c / (a * a + c * c + EPS);
                        (xi + 1.0).powi(2) / 4.0
                    })
                    .collect()
            };
            enhanced.iter().sum::<f64>() / n
        })
        .collect()
}

/// Max F-measure with literal per-threshold counting.
pub fn oracle_fmax(p: &[f64], m: &BinaryMask, beta2: f64) -> f64 {
    let g = m.bits();
    let pos = g.iter().filter(|&&b| b).count() as f64;
    (0..256)
        .map(|k| {
            let t = (k + 1) as f64 / 256.0;
            let tp = p.iter().zip(g).filter(|(&v, &b)| v >= t && b).count() as f64;
            let pred = p.iter().filter(|&&v| v >= t).count() as f64;
            let prec = if pred == 0.0 { 0.0 } else { tp / pred };
            let rec = tp / pos;
            if prec == 0.0 {
                0.0
            } else {
                (1.0 + beta2) * prec * rec / (beta2 * prec + rec)
            }
        })
        .fold(0.0, f64::max)
}

/// Handcrafted metric fixtures between 5x5 and 32x32.
pub fn metric_fixtures() -> Vec<(String, Vec<f64>, BinaryMask)> {
    let mut out = Vec::new();
    let square = BinaryMask::from_fn(5, 5, |r, c| (1..4).contains(&r) && (1..4).contains(&c));
    out.push(("5x5 square, soft".to_string(), (0..25).map(|i| (i % 7) as f64 / 6.0).collect(), square.clone()));
    out.push((
        "5x5 square, shifted".to_string(),
        (0..25).map(|i| if (i / 5) < 3 && (i % 5) < 3 { 0.9 } else { 0.1 }).collect(),
        square,
    ));
    let ring = BinaryMask::from_fn(12, 9, |r, c| {
        let d = (r as f64 - 4.0).powi(2) + (c as f64 - 6.0).powi(2);
        (4.0..=12.0).contains(&d)
    });
    out.push(("12x9 ring, gradient".to_string(), (0..108).map(|i| (i % 12) as f64 / 11.0).collect(), ring));
    let corner = BinaryMask::from_fn(16, 16, |r, c| r + c < 6);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let p = noisy_prediction(&mut rng, &corner, 0.6);
    out.push(("16x16 corner, noisy".to_string(), p, corner));
    let two = BinaryMask::from_fn(32, 24, |r, c| (r / 6 + c / 8) % 3 == 0);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let p = noisy_prediction(&mut rng, &two, 0.3);
    out.push(("32x24 blocks, noisy".to_string(), p, two));
    let stripe = BinaryMask::from_fn(20, 20, |_, c| c == 19);
    out.push(("20x20 edge stripe, constant".to_string(), vec![0.5; 400], stripe));
    let blob = BinaryMask::from_fn(32, 32, |r, c| (r as f64 - 10.0).powi(2) + (c as f64 - 20.0).powi(2) < 50.0);
    let inv: Vec<f64> = blob.bits().iter().map(|&b| if b { 0.2 } else { 0.7 }).collect();
    out.push(("32x32 disc, inverted".to_string(), inv, blob));
    out
}

/// Eight 64x64 images with one bright blob each on a darker textured
/// background, and their masks.
pub fn blob_dataset(seed: u64) -> Vec<(gapnet::dataio::RgbImage, BinaryMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..8)
        .map(|_| {
            let (cy, cx) = (rng.random_range(18.0..46.0), rng.random_range(18.0..46.0));
            let (ry, rx) = (rng.random_range(8.0..16.0), rng.random_range(8.0..16.0));
            let mask = BinaryMask::from_fn(64, 64, |r, c| {
                let (dy, dx) = ((r as f64 - cy) / ry, (c as f64 - cx) / rx);
                dy * dy + dx * dx <= 1.0
            });
            let tint = [rng.random_range(0.6..1.0), rng.random_range(0.6..1.0), rng.random_range(0.0..0.4)];
            let mut planes = vec![0.0f32; 3 * 64 * 64];
            for ch in 0..3 {
                for i in 0..64 * 64 {
                    let base = if mask.bits()[i] { tint[ch] } else { 0.15 + 0.1 * (((i / 64) + (i % 64)) % 5) as f64 / 4.0 };
                    planes[ch * 4096 + i] = (base + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0) as f32;
                }
            }
            (
                gapnet::dataio::RgbImage {
                    width: 64,
                    height: 64,
                    planes,
                },
                mask,
            )
        })
        .collect()
}

/// Central-difference check of parameter gradients. Probes the middle
/// element of `probes` trainable tensors spread evenly through the store and
/// returns the largest relative error. `h` is the central-difference step. Gradients smaller than 1e-4 are
/// compared in absolute terms: structurally zero gradients (such as a key
/// bias under softmax) otherwise turn rounding noise into large ratios.
pub fn param_check<F>(store: &gapnet::params::ParamStore<f64>, f: F, probes: usize, h: f64) -> f64
where
    F: for<'t, 's> Fn(&gapnet::params::Ctx<'t, 's, f64>) -> gapnet::error::Result<gapnet_tensor::Var<'t, f64>>,
{
    use gapnet::params::Ctx;
    let tape = gapnet_tensor::Tape::new();
    let grads: std::collections::HashMap<_, _> = {
        let ctx = Ctx::with_tape(store, Some(&tape), false);
        let y = f(&ctx).unwrap();
        tape.backward(&y).unwrap();
        ctx.gradients().into_iter().collect()
    };
    let ids = store.trainable_ids();
    let step = (ids.len() as f64 / probes as f64).max(1.0);
    let eval = |s: &gapnet::params::ParamStore<f64>| f(&Ctx::inference(s)).unwrap().value().data()[0];
    let mut worst = 0.0f64;
    for p in 0..probes.min(ids.len()) {
        let id = ids[(p as f64 * step) as usize];
        let k = store.get(id).numel() / 2;
        let analytic = grads.get(&id).map_or(0.0, |g: &gapnet_tensor::Tensor<f64>| g.data()[k]);
        let mut s = store.clone();
        let base = s.get(id).data()[k];
        s.get_mut(id).data_mut()[k] = base + h;
        let up = eval(&s);
        s.get_mut(id).data_mut()[k] = base - h;
        let down = eval(&s);
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}

/// Fixed random weighting so a scalar loss depends on every output element.
pub fn weighted_sum<'t>(y: &gapnet_tensor::Var<'t, f64>, seed: u64) -> gapnet_tensor::Result<gapnet_tensor::Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = gapnet_tensor::Var::constant(gapnet_tensor::Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0)));
    y.mul(&w)?.sum_all()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> gapnet_tensor::Tensor<f64> {
    gapnet_tensor::Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}
