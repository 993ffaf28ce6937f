//! Saliency evaluation: MAE, max F-measure, weighted F-measure, S-measure
//! and max / mean E-measure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use gapnet_tensor::kernels::resize_bilinear;

use crate::dataio::{files_by_stem, load_mask, read_gray};
use crate::error::{invalid, Error, Result};
use crate::labels::{nearest_target, BinaryMask};

/// Number of binarization thresholds in the F- and E-measure sweeps.
pub const THRESHOLDS: usize = 256;
/// Precision weight of the F-measure.
pub const F_BETA2: f64 = 0.3;
const EPS: f64 = f64::EPSILON;

/// Threshold `k` of the sweep: `(k + 1) / 256`, so the sweep covers
/// `(0, 1]` and a pixel counts as salient when `p >= t`.
pub fn threshold(k: usize) -> f64 {
    (k + 1) as f64 / THRESHOLDS as f64
}

/// Bucket of `p` in the sweep: the number of thresholds `p` reaches.
fn bucket(p: f64) -> usize {
    // Thresholds are dyadic, so `p * 256` compares exactly.
    ((p * THRESHOLDS as f64).floor().max(0.0) as usize).min(THRESHOLDS)
}

fn check(p: &[f64], g: &BinaryMask) -> Result<()> {
    if p.len() != g.bits().len() || p.is_empty() {
        return Err(invalid(format!(
            "prediction has {} pixels, mask {}x{}",
            p.len(),
            g.width(),
            g.height()
        )));
    }
    Ok(())
}

fn gt_value(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn mae(p: &[f64], g: &BinaryMask) -> Result<f64> {
    check(p, g)?;
    let s: f64 = p.iter().zip(g.bits()).map(|(&pv, &gv)| (pv - gt_value(gv)).abs()).sum();
    Ok(s / p.len() as f64)
}

/// Precision, recall and F at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrF {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// `F_β` from precision and recall; zero precision gives zero.
pub fn f_beta(precision: f64, recall: f64, beta2: f64) -> f64 {
    if precision == 0.0 || precision + recall == 0.0 {
        return 0.0;
    }
    (1.0 + beta2) * precision * recall / (beta2 * precision + recall)
}

/// Salient-pixel counts per threshold: `(fg, all)` where `fg` counts
/// ground-truth foreground pixels predicted salient.
fn sweep_counts(p: &[f64], g: &BinaryMask) -> (Vec<usize>, Vec<usize>) {
    let mut hist_fg = vec![0usize; THRESHOLDS + 1];
    let mut hist_all = vec![0usize; THRESHOLDS + 1];
    for (&pv, &gv) in p.iter().zip(g.bits()) {
        let b = bucket(pv);
        hist_all[b] += 1;
        if gv {
            hist_fg[b] += 1;
        }
    }
    // count[k] = pixels with bucket >= k + 1.
    let mut fg = vec![0; THRESHOLDS];
    let mut all = vec![0; THRESHOLDS];
    let (mut acc_fg, mut acc_all) = (0, 0);
    for k in (0..THRESHOLDS).rev() {
        acc_fg += hist_fg[k + 1];
        acc_all += hist_all[k + 1];
        fg[k] = acc_fg;
        all[k] = acc_all;
    }
    (fg, all)
}

/// The 256-point precision / recall / F curve; `None` for an empty mask.
pub fn f_curve(p: &[f64], g: &BinaryMask) -> Result<Option<Vec<PrF>>> {
    check(p, g)?;
    let positives = g.count();
    if positives == 0 {
        return Ok(None);
    }
    let (tp, predicted) = sweep_counts(p, g);
    Ok(Some(
        tp.iter()
            .zip(&predicted)
            .map(|(&t, &n)| {
                let precision = if n == 0 { 0.0 } else { t as f64 / n as f64 };
                let recall = t as f64 / positives as f64;
                PrF {
                    precision,
                    recall,
                    f: f_beta(precision, recall, F_BETA2),
                }
            })
            .collect(),
    ))
}

pub fn f_max(p: &[f64], g: &BinaryMask) -> Result<Option<f64>> {
    Ok(f_curve(p, g)?.map(|c| c.iter().map(|x| x.f).fold(0.0, f64::max)))
}

/// Normalized 7×7 Gaussian with σ = 5, entries below `ε·max` dropped.
fn gaussian_7x7() -> [[f64; 7]; 7] {
    let sigma = 5.0f64;
    let mut k = [[0.0; 7]; 7];
    let mut max = 0.0f64;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            max = max.max(*v);
        }
    }
    let mut sum = 0.0;
    for v in k.iter_mut().flatten() {
        if *v < EPS * max {
            *v = 0.0;
        }
        sum += *v;
    }
    for v in k.iter_mut().flatten() {
        *v /= sum;
    }
    k
}

/// Weighted F-measure with `beta2` weighting recall against precision;
/// `None` for an empty mask.
pub fn f_weighted(p: &[f64], g: &BinaryMask, beta2: f64) -> Result<Option<f64>> {
    check(p, g)?;
    if g.is_empty() {
        return Ok(None);
    }
    let (w, h) = (g.width(), g.height());
    let gb = g.bits();
    let (dist2, nearest) = nearest_target(gb, w, h);
    let e: Vec<f64> = p.iter().zip(gb).map(|(&pv, &gv)| (pv - gt_value(gv)).abs()).collect();
    // Background errors take the error of their nearest foreground pixel.
    let et: Vec<f64> = (0..e.len()).map(|i| if gb[i] { e[i] } else { e[nearest[i]] }).collect();
    let k = gaussian_7x7();
    let mut ew_fg = 0.0;
    let mut ew_bg = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if gb[i] {
                let mut ea = 0.0;
                for (a, krow) in k.iter().enumerate() {
                    let rr = r as isize + a as isize - 3;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for (b, &kv) in krow.iter().enumerate() {
                        let cc = c as isize + b as isize - 3;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        ea += kv * et[rr as usize * w + cc as usize];
                    }
                }
                ew_fg += if ea < e[i] { ea } else { e[i] };
            } else {
                let d = (dist2[i] as f64).sqrt();
                ew_bg += e[i] * (2.0 - ((0.5f64).ln() / 5.0 * d).exp());
            }
        }
    }
    let fg = g.count() as f64;
    let tpw = fg - ew_fg;
    let recall = 1.0 - ew_fg / fg;
    let precision = tpw / (tpw + ew_bg + EPS);
    Ok(Some((1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS)))
}

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

/// Similarity of a region's values to the ideal all-ones response.
fn s_object(values: &[f64]) -> f64 {
    let (x, n) = mean(values.iter().copied());
    let sigma = if n > 1 {
        (values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_score(p: &[f64], g: &BinaryMask) -> f64 {
    let fg: Vec<f64> = p.iter().zip(g.bits()).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
    let bg: Vec<f64> = p.iter().zip(g.bits()).filter(|(_, &b)| !b).map(|(&v, _)| 1.0 - v).collect();
    let u = fg.len() as f64 / p.len() as f64;
    u * s_object(&fg) + (1.0 - u) * s_object(&bg)
}

/// Structural similarity of one quadrant.
fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    let denom = (n.max(2) - 1) as f64;
    let (x, _) = mean(p.iter().copied());
    let (y, _) = mean(g.iter().copied());
    let sx = p.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / denom;
    let sy = g.iter().map(|v| (v - y) * (v - y)).sum::<f64>() / denom;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point: the foreground centroid rounded half-to-even, plus one.
fn centroid(g: &BinaryMask) -> (usize, usize) {
    let (w, h) = (g.width(), g.height());
    let n = g.count();
    if n == 0 {
        return (
            (w as f64 / 2.0).round_ties_even() as usize + 1,
            (h as f64 / 2.0).round_ties_even() as usize + 1,
        );
    }
    let (mut sr, mut sc) = (0.0, 0.0);
    for (i, &b) in g.bits().iter().enumerate() {
        if b {
            sr += (i / w) as f64;
            sc += (i % w) as f64;
        }
    }
    let x = (sc / n as f64).round_ties_even() as usize + 1;
    let y = (sr / n as f64).round_ties_even() as usize + 1;
    (x.min(w), y.min(h))
}

fn region_score(p: &[f64], g: &BinaryMask) -> f64 {
    let (w, h) = (g.width(), g.height());
    let (x, y) = centroid(g);
    let area = (w * h) as f64;
    let quads = [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)];
    let mut score = 0.0;
    for (r0, r1, c0, c1) in quads {
        let count = (r1 - r0) * (c1 - c0);
        if count == 0 {
            continue;
        }
        let mut pq = Vec::with_capacity(count);
        let mut gq = Vec::with_capacity(count);
        for r in r0..r1 {
            for c in c0..c1 {
                pq.push(p[r * w + c]);
                gq.push(gt_value(g.get(r, c)));
            }
        }
        score += count as f64 / area * ssim(&pq, &gq);
    }
    score
}

/// Structure measure, equal parts object- and region-aware similarity.
pub fn s_measure(p: &[f64], g: &BinaryMask) -> Result<f64> {
    check(p, g)?;
    let fg = g.count();
    let s = if fg == 0 {
        1.0 - mean(p.iter().copied()).0
    } else if fg == p.len() {
        mean(p.iter().copied()).0
    } else {
        0.5 * object_score(p, g) + 0.5 * region_score(p, g)
    };
    Ok(s.clamp(0.0, 1.0))
}

/// Enhanced-alignment score of one binarized prediction from its confusion
/// counts `(both, gt only, pred only, neither)`.
fn e_from_counts(n11: usize, n10: usize, n01: usize, n00: usize) -> f64 {
    let n = (n11 + n10 + n01 + n00) as f64;
    let fg = n11 + n10;
    let pred = n11 + n01;
    if fg == 0 {
        return (n10 + n00) as f64 / n;
    }
    if fg == n as usize {
        return pred as f64 / n;
    }
    let mg = fg as f64 / n;
    let mp = pred as f64 / n;
    let term = |gv: f64, pv: f64| {
        let (a, b) = (gv - mg, pv - mp);
        let xi = 2.0 * a * b / (a * a + b * b + EPS);
        (xi + 1.0) * (xi + 1.0) / 4.0
    };
    (n11 as f64 * term(1.0, 1.0) + n10 as f64 * term(1.0, 0.0) + n01 as f64 * term(0.0, 1.0) + n00 as f64 * term(0.0, 0.0))
        / n
}

/// E-measure at every threshold of the sweep.
pub fn e_curve(p: &[f64], g: &BinaryMask) -> Result<Vec<f64>> {
    check(p, g)?;
    let (tp, predicted) = sweep_counts(p, g);
    let n = p.len();
    let fg = g.count();
    Ok((0..THRESHOLDS)
        .map(|k| {
            let n11 = tp[k];
            let n01 = predicted[k] - tp[k];
            let n10 = fg - n11;
            e_from_counts(n11, n10, n01, n - n11 - n10 - n01)
        })
        .collect())
}

/// `(max, mean)` of the E-measure curve.
pub fn e_measure(p: &[f64], g: &BinaryMask) -> Result<(f64, f64)> {
    let c = e_curve(p, g)?;
    let max = c.iter().copied().fold(0.0, f64::max);
    Ok((max, c.iter().sum::<f64>() / c.len() as f64))
}

/// Rescales to `[0, 1]` only when values leave that range.
pub fn normalize_prediction(p: &mut [f64]) {
    let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if lo >= 0.0 && hi <= 1.0 {
        return;
    }
    let span = hi - lo;
    for v in p.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// The six scores of one image; threshold-based scores are absent when the
/// mask has no foreground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageScores {
    pub mae: f64,
    pub f_max: Option<f64>,
    pub f_weighted: Option<f64>,
    pub s_measure: Option<f64>,
    pub e_max: Option<f64>,
    pub e_mean: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    pub wf_beta2: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { wf_beta2: 1.0 }
    }
}

pub fn score_image(p: &[f64], g: &BinaryMask, opts: MetricOptions) -> Result<ImageScores> {
    let mae = mae(p, g)?;
    if g.is_empty() {
        return Ok(ImageScores {
            mae,
            f_max: None,
            f_weighted: None,
            s_measure: None,
            e_max: None,
            e_mean: None,
        });
    }
    let (e_max, e_mean) = e_measure(p, g)?;
    Ok(ImageScores {
        mae,
        f_max: f_max(p, g)?,
        f_weighted: f_weighted(p, g, opts.wf_beta2)?,
        s_measure: Some(s_measure(p, g)?),
        e_max: Some(e_max),
        e_mean: Some(e_mean),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub f_max: f64,
    pub f_weighted: f64,
    pub s_measure: f64,
    pub e_max: f64,
    pub e_mean: f64,
    /// Per-image scores keyed by file stem.
    pub per_image: BTreeMap<String, ImageScores>,
    pub count: usize,
    /// Stems whose masks have no foreground (scored by MAE only).
    pub empty_gt: Vec<String>,
    /// Stems that could not be scored, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl MetricReport {
    /// Unweighted means of per-image scores.
    pub fn aggregate(per_image: BTreeMap<String, ImageScores>, skipped: Vec<(String, String)>) -> Self {
        let avg = |f: &dyn Fn(&ImageScores) -> Option<f64>| mean(per_image.values().filter_map(f)).0;
        MetricReport {
            mae: avg(&|s| Some(s.mae)),
            f_max: avg(&|s| s.f_max),
            f_weighted: avg(&|s| s.f_weighted),
            s_measure: avg(&|s| s.s_measure),
            e_max: avg(&|s| s.e_max),
            e_mean: avg(&|s| s.e_mean),
            count: per_image.len(),
            empty_gt: per_image
                .iter()
                .filter(|(_, s)| s.f_max.is_none())
                .map(|(k, _)| k.clone())
                .collect(),
            per_image,
            skipped,
        }
    }

    /// Machine-readable `key=value` lines.
    pub fn key_values(&self) -> String {
        format!(
            "mae={:.6}\nfmax={:.6}\nfw={:.6}\nsm={:.6}\nemax={:.6}\nemean={:.6}\ncount={}\n",
            self.mae, self.f_max, self.f_weighted, self.s_measure, self.e_max, self.e_mean, self.count
        )
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(out, "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "image", "mae", "fmax", "fw", "sm", "emax", "emean");
        for (stem, s) in &self.per_image {
            let _ = writeln!(
                out,
                "{:<24} {:>7.4} {:>7} {:>7} {:>7} {:>7} {:>7}",
                stem,
                s.mae,
                opt(s.f_max),
                opt(s.f_weighted),
                opt(s.s_measure),
                opt(s.e_max),
                opt(s.e_mean)
            );
        }
        let _ = writeln!(
            out,
            "{:<24} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            format!("mean ({})", self.count),
            self.mae,
            self.f_max,
            self.f_weighted,
            self.s_measure,
            self.e_max,
            self.e_mean
        );
        for stem in &self.empty_gt {
            let _ = writeln!(out, "note: {stem} has an empty mask; only mae is scored");
        }
        for (stem, why) in &self.skipped {
            let _ = writeln!(out, "skipped: {stem}: {why}");
        }
        out
    }
}

const MAP_EXTS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "pgm", "ppm", "pnm"];

/// Scores every prediction in `pred_dir` against the mask with the same
/// stem in `gt_dir`. Predictions are resized to the mask extent. Files that
/// cannot be paired or read are listed in [`MetricReport::skipped`].
/// Images are scored on all available cores.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, opts: MetricOptions) -> Result<MetricReport> {
    let preds = files_by_stem(pred_dir, &MAP_EXTS)?;
    let gts = files_by_stem(gt_dir, &MAP_EXTS)?;
    let mut per_image = BTreeMap::new();
    let mut skipped = Vec::new();
    for stem in preds.keys().filter(|s| !gts.contains_key(*s)) {
        skipped.push((stem.clone(), "no matching mask".to_string()));
    }
    let mut jobs = Vec::new();
    for (stem, gt_path) in &gts {
        match preds.get(stem) {
            Some(pred_path) => jobs.push((stem, gt_path, pred_path)),
            None => skipped.push((stem.clone(), "no matching prediction".to_string())),
        }
    }
    let score = |gt_path: &Path, pred_path: &Path| -> Result<ImageScores> {
        let g = load_mask(gt_path, 128)?;
        let (w, h, mut p) = read_gray(pred_path)?;
        if (w, h) != (g.width(), g.height()) {
            p = resize_bilinear(&p, 1, h, w, g.height(), g.width());
        }
        normalize_prediction(&mut p);
        score_image(&p, &g, opts)
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let mut results: Vec<Option<Result<ImageScores>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                let (jobs, score) = (&jobs, &score);
                scope.spawn(move || {
                    (k..jobs.len())
                        .step_by(workers)
                        .map(|i| (i, score(jobs[i].1, jobs[i].2)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("metric worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    for ((stem, _, _), r) in jobs.iter().zip(results) {
        match r.expect("every job is scored") {
            Ok(s) => {
                per_image.insert((*stem).clone(), s);
            }
            Err(e) => skipped.push(((*stem).clone(), e.to_string())),
        }
    }
    if per_image.is_empty() {
        return Err(Error::Dataset(format!(
            "nothing to evaluate in {} against {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    Ok(MetricReport::aggregate(per_image, skipped))
}
