//! Optimization, training and inference.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gapnet_tensor::kernels::resize_bilinear;
use gapnet_tensor::{Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{
    files_by_stem, load_mask, read_checkpoint, read_flo, read_rgb, write_checkpoint, write_gray, Normalization,
    RgbImage, RunConfig, SampleRecord,
};
use crate::error::{invalid, Error, Result};
use crate::labels::{decompose, BinaryMask, DecomposeParams, RegionTargets};
use crate::losses::overall_loss;
use crate::model::{ForwardOptions, Gapnet, Mode, ModelConfig, ModelOutputs};
use crate::params::{Ctx, ParamId, ParamStore};

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub cfg: AdamConfig,
    pub t: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// One bias-corrected update of every parameter in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if store.get(*id).shape() != g.shape() {
                return Err(invalid(format!(
                    "gradient {:?} does not match parameter {} {:?}",
                    g.shape(),
                    store.entry(*id).name,
                    store.get(*id).shape()
                )));
            }
        }
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        for (id, g) in grads {
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
            let p = store.get_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i].as_f64() / c1;
                let vhat = v[i].as_f64() / c2;
                let pi = p[i].as_f64();
                p[i] = T::lit(pi - lr * (mhat / (vhat.sqrt() + eps)) - lr * weight_decay * pi);
            }
        }
        Ok(())
    }
}

/// `base · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base: f64, power: f64) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(invalid(format!("poly_lr: iteration {iter} outside 0..={max_iter}")));
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// A decoded training sample at native resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: BinaryMask,
    /// Flow rendered as a three-plane image (video mode).
    pub flow: Option<RgbImage>,
}

impl Sample {
    pub fn load(rec: &SampleRecord) -> Result<Self> {
        Ok(Sample {
            image: read_rgb(&rec.image_path)?,
            mask: load_mask(&rec.mask_path, 128)?,
            flow: rec.flow_path.as_deref().map(read_flo).transpose()?.map(|f| f.to_image()),
        })
    }
}

/// Resizes a mask by bilinear interpolation of its 0/1 values, kept at >= 0.5.
pub fn resize_mask(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    if (mask.height(), mask.width()) == (height, width) {
        return mask.clone();
    }
    let v: Vec<f32> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let r = resize_bilinear(&v, 1, mask.height(), mask.width(), height, width);
    BinaryMask::new(width, height, r.iter().map(|&x| x >= 0.5).collect()).expect("resized extent")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub run: RunConfig,
    pub model: ModelConfig,
    /// Random horizontal flips with probability 0.5.
    pub flip: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub norm: Normalization,
}

impl TrainOptions {
    pub fn new(run: RunConfig) -> Result<Self> {
        Ok(TrainOptions {
            model: run.model_config()?,
            run,
            flip: true,
            max_steps: None,
            norm: Normalization::default(),
        })
    }
}

/// Seeded record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub seed: u64,
    pub config: String,
    pub losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut out = format!("seed = {}\n# config\n{}# losses\n", self.seed, self.config);
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "step {i} loss {l:.9e}");
        }
        for (i, s) in self.epoch_seconds.iter().enumerate() {
            let _ = writeln!(out, "epoch {i} seconds {s:.3}");
        }
        out
    }
}

/// Renders the keys of a run config back into config-file syntax.
pub fn config_snapshot(run: &RunConfig, model: &ModelConfig) -> String {
    let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let mut s = String::new();
    let preset = match run.preset {
        crate::dataio::Preset::Paper => "paper",
        crate::dataio::Preset::Toy => "toy",
    };
    let _ = writeln!(s, "preset = {preset}");
    let _ = writeln!(s, "width_multiplier = {}", model.backbone.width_multiplier);
    let _ = writeln!(s, "csa_dim = {}", model.csa.dim);
    let _ = writeln!(s, "csa_heads = {}", model.csa.heads);
    let _ = writeln!(s, "csa_ffn_expansion = {}", model.csa.ffn_expansion);
    let _ = writeln!(s, "gpc_m = {}", model.gpc.m);
    let _ = writeln!(s, "gpc_atrous_rates = {}", list(&model.gpc.atrous_rates));
    let _ = writeln!(s, "reduce_channels = {}", list(&model.reduce_channels));
    let _ = writeln!(s, "supervision_setting = {}", run.supervision);
    let _ = writeln!(s, "lr = {}", run.lr);
    let _ = writeln!(s, "lr_power = {}", run.lr_power);
    let _ = writeln!(s, "epochs = {}", run.epochs);
    let _ = writeln!(s, "batch_size = {}", run.batch_size);
    let _ = writeln!(s, "weight_decay = {}", run.weight_decay);
    let _ = writeln!(s, "adam_beta1 = {}", run.adam_beta1);
    let _ = writeln!(s, "adam_beta2 = {}", run.adam_beta2);
    let _ = writeln!(s, "seed = {}", run.seed);
    let _ = writeln!(s, "train_sizes = {}", list(&run.train_sizes));
    let _ = writeln!(s, "infer_size = {}", run.infer_size);
    let mode = match model.mode {
        Mode::Image => "image",
        Mode::Video => "video",
    };
    let _ = writeln!(s, "mode = {mode}");
    let _ = writeln!(s, "wf_beta2 = {}", run.wf_beta2);
    s
}

/// Model, parameters and optimizer state of one training run.
/// Images, optional flow and region targets of one assembled batch.
type Batch = (Tensor<f32>, Option<Tensor<f32>>, Vec<RegionTargets>);

pub struct Trainer {
    pub model: Gapnet,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub opts: TrainOptions,
    rng: ChaCha8Rng,
    pub step: usize,
    /// Learning rate before the poly schedule.
    pub base_lr: f64,
}

impl Trainer {
    pub fn new(opts: TrainOptions) -> Result<Self> {
        let (model, store) = Gapnet::build(&opts.model, opts.run.seed)?;
        let run = &opts.run;
        Ok(Trainer {
            model,
            store,
            adam: Adam::new(AdamConfig {
                beta1: run.adam_beta1,
                beta2: run.adam_beta2,
                eps: 1e-8,
                weight_decay: run.weight_decay,
            }),
            rng: ChaCha8Rng::seed_from_u64(run.seed ^ 0x9e37_79b9_7f4a_7c15),
            step: 0,
            base_lr: run.lr,
            opts,
        })
    }

    /// Loads matching tensors from an earlier checkpoint. Starting a video
    /// model from an image checkpoint lowers the learning rate tenfold.
    pub fn init_from(&mut self, path: &Path) -> Result<usize> {
        let tensors = read_checkpoint::<f32>(path)?;
        let missing = self.store.load_subset(&tensors)?;
        if self.opts.model.mode == Mode::Video && missing > 0 {
            self.base_lr /= 10.0;
        }
        Ok(missing)
    }

    /// Assembles a batch at `size × size` with optional flips.
    fn prepare(&mut self, batch: &[&Sample], size: usize) -> Result<Batch> {
        let video = self.opts.model.mode == Mode::Video;
        let plane = 3 * size * size;
        let mut images = Vec::with_capacity(batch.len() * plane);
        let mut flows = Vec::with_capacity(if video { batch.len() * plane } else { 0 });
        let mut targets = Vec::with_capacity(batch.len());
        for s in batch {
            let flip = self.opts.flip && self.rng.random_bool(0.5);
            let mut img = s.image.resized(size, size);
            let mut mask = resize_mask(&s.mask, size, size);
            if flip {
                img = img.flipped();
                mask = mask.flipped();
            }
            images.extend_from_slice(img.to_tensor(&self.opts.norm).data());
            if video {
                let f = s.flow.as_ref().ok_or_else(|| Error::Dataset("video training needs flow for every sample".into()))?;
                let mut f = f.resized(size, size);
                if flip {
                    f = f.flipped();
                }
                flows.extend_from_slice(f.to_tensor(&self.opts.norm).data());
            }
            targets.push(RegionTargets::new(&mask)?);
        }
        let images = Tensor::new(&[batch.len(), 3, size, size], images)?;
        let flows = if video { Some(Tensor::new(&[batch.len(), 3, size, size], flows)?) } else { None };
        Ok((images, flows, targets))
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[&Sample], size: usize, lr: f64) -> Result<f64> {
        let (images, flows, targets) = self.prepare(batch, size)?;
        let setting = self.opts.run.supervision;
        let tape = Tape::new();
        let (loss, grads, stats) = {
            let ctx = Ctx::with_tape(&self.store, Some(&tape), true);
            let x = Var::constant(images);
            let fo = ForwardOptions {
                aux_heads: setting.needs_aux(),
                bypass_flow: false,
            };
            let out = match flows {
                Some(f) => self.model.forward_video(&ctx, &x, &Var::constant(f), fo)?,
                None => self.model.forward_image(&ctx, &x, fo)?,
            };
            let report = overall_loss(&out, &targets, setting)?;
            let loss = report.value();
            if !loss.is_finite() {
                return Err(Error::Tensor(gapnet_tensor::TensorError::NonFinite("loss")));
            }
            tape.backward(&report.overall)?;
            (loss, ctx.gradients(), ctx.take_stats())
        };
        self.store.apply_batch_stats(stats, BN_MOMENTUM);
        self.adam.step(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok(loss)
    }

    /// Seeded epochs over `samples` with per-batch size choice and the poly
    /// schedule. `on_epoch` runs after each epoch (e.g. to write checkpoints).
    pub fn fit(
        &mut self,
        samples: &[Sample],
        mut on_epoch: impl FnMut(usize, &Trainer) -> Result<()>,
    ) -> Result<RunManifest> {
        if samples.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        let run = self.opts.run.clone();
        let per_epoch = samples.len().div_ceil(run.batch_size);
        let total = per_epoch * run.epochs;
        let total = self.opts.max_steps.map_or(total, |m| m.min(total));
        let mut losses = Vec::with_capacity(total);
        let mut epoch_seconds = Vec::new();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        'epochs: for epoch in 0..run.epochs {
            let t0 = Instant::now();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(run.batch_size) {
                if losses.len() >= total {
                    break 'epochs;
                }
                let size = run.train_sizes[self.rng.random_range(0..run.train_sizes.len())];
                let lr = poly_lr(losses.len(), total, self.base_lr, run.lr_power)?;
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                losses.push(self.train_step(&batch, size, lr)?);
            }
            epoch_seconds.push(t0.elapsed().as_secs_f64());
            on_epoch(epoch, self)?;
        }
        Ok(RunManifest {
            seed: run.seed,
            config: config_snapshot(&run, &self.opts.model),
            losses,
            epoch_seconds,
        })
    }

    pub fn predictor(&self, size: usize) -> Predictor<'_> {
        Predictor {
            model: &self.model,
            store: &self.store,
            size,
            norm: self.opts.norm,
        }
    }
}

/// Trains on the records and writes `epoch_{k}.ckpt`, `model.ckpt`,
/// `config.txt` and `manifest.txt` into `out_dir`.
pub fn train(records: &[SampleRecord], opts: TrainOptions, init: Option<&Path>, out_dir: &Path) -> Result<RunManifest> {
    if opts.model.mode == Mode::Video && records.iter().any(|r| r.flow_path.is_none()) {
        return Err(Error::Dataset("video mode needs a flow file for every record".into()));
    }
    let samples = records.iter().map(Sample::load).collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(opts)?;
    if let Some(p) = init {
        trainer.init_from(p)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = trainer.fit(&samples, |epoch, t| {
        write_checkpoint(&out_dir.join(format!("epoch_{epoch}.ckpt")), &t.store.named())
    })?;
    write_checkpoint(&out_dir.join("model.ckpt"), &trainer.store.named())?;
    let config = out_dir.join("config.txt");
    fs::write(&config, &manifest.config).map_err(|e| Error::io(&config, e))?;
    let mpath = out_dir.join("manifest.txt");
    fs::write(&mpath, manifest.render()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Eval-mode forward at a fixed square size.
pub struct Predictor<'a> {
    pub model: &'a Gapnet,
    pub store: &'a ParamStore<f32>,
    pub size: usize,
    pub norm: Normalization,
}

/// Probability maps resized back to the source extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub width: usize,
    pub height: usize,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub p3: Vec<f64>,
}

impl Predictor<'_> {
    fn back_resize(&self, p: &Var<'_, f32>, n: usize, h: usize, w: usize) -> Vec<Vec<f64>> {
        let s = self.size;
        (0..n)
            .map(|b| {
                let plane = &p.value().data()[b * s * s..(b + 1) * s * s];
                resize_bilinear(plane, 1, s, s, h, w).iter().map(|&v| v as f64).collect()
            })
            .collect()
    }

    fn finish(&self, out: ModelOutputs<'_, f32>, n: usize, h: usize, w: usize) -> Vec<Prediction> {
        let p1 = self.back_resize(&out.p1, n, h, w);
        let p2 = self.back_resize(&out.p2, n, h, w);
        let p3 = self.back_resize(&out.p3, n, h, w);
        p1.into_iter()
            .zip(p2)
            .zip(p3)
            .map(|((p1, p2), p3)| Prediction {
                width: w,
                height: h,
                p1,
                p2,
                p3,
            })
            .collect()
    }

    pub fn predict(&self, image: &RgbImage) -> Result<Prediction> {
        let ctx = Ctx::inference(self.store);
        let x = Var::constant(image.resized(self.size, self.size).to_tensor(&self.norm));
        let out = self.model.forward_image(&ctx, &x, ForwardOptions::default())?;
        Ok(self.finish(out, 1, image.height, image.width).remove(0))
    }

    pub fn predict_video(&self, frame: &RgbImage, flow: &RgbImage) -> Result<Prediction> {
        let ctx = Ctx::inference(self.store);
        let x = Var::constant(frame.resized(self.size, self.size).to_tensor(&self.norm));
        let f = Var::constant(flow.resized(self.size, self.size).to_tensor(&self.norm));
        let out = self.model.forward_video(&ctx, &x, &f, ForwardOptions::default())?;
        Ok(self.finish(out, 1, frame.height, frame.width).remove(0))
    }

    /// Eval-mode scoring batch: p3 maps for several images sharing the size.
    pub fn predict_batch(&self, images: &[&RgbImage]) -> Result<Vec<Prediction>> {
        let s = self.size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            data.extend_from_slice(img.resized(s, s).to_tensor(&self.norm).data());
        }
        let ctx = Ctx::inference(self.store);
        let x = Var::constant(Tensor::new(&[images.len(), 3, s, s], data)?);
        let out = self.model.forward_image(&ctx, &x, ForwardOptions::default())?;
        let (h, w) = images.first().map_or((s, s), |i| (i.height, i.width));
        if images.iter().any(|i| (i.height, i.width) != (h, w)) {
            return Err(invalid("batched prediction needs images of one extent"));
        }
        Ok(self.finish(out, images.len(), h, w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferOptions {
    /// Also write `<stem>_p1.png` and `<stem>_p2.png`.
    pub all_outputs: bool,
    /// Also write `<stem>_regions.png`, the region split of the binarized p3.
    pub regions: bool,
}

/// Loads a checkpoint into a freshly built model; every tensor must match.
pub fn load_model(cfg: &ModelConfig, checkpoint: &Path) -> Result<(Gapnet, ParamStore<f32>)> {
    let (model, mut store) = Gapnet::build::<f32>(cfg, 0)?;
    store.load_named(&read_checkpoint::<f32>(checkpoint)?)?;
    Ok((model, store))
}

/// Writes `<stem>.png` (p3, 255 = salient) for every image in `input_dir`,
/// or for every frame of `input_dir/{frames,flow}` in video mode. Returns
/// the number of maps written.
pub fn infer(
    cfg: &ModelConfig,
    checkpoint: &Path,
    input_dir: &Path,
    out_dir: &Path,
    size: usize,
    opts: InferOptions,
) -> Result<usize> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(invalid(format!("inference size {size} must be a positive multiple of 32")));
    }
    let (model, store) = load_model(cfg, checkpoint)?;
    let predictor = Predictor {
        model: &model,
        store: &store,
        size,
        norm: Normalization::default(),
    };
    const EXTS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "pgm", "ppm", "pnm"];
    let jobs: Vec<(String, PathBuf, Option<PathBuf>)> = match cfg.mode {
        Mode::Image => files_by_stem(input_dir, &EXTS)?.into_iter().map(|(s, p)| (s, p, None)).collect(),
        Mode::Video => {
            let flows = files_by_stem(&input_dir.join("flow"), &["flo"])?;
            files_by_stem(&input_dir.join("frames"), &EXTS)?
                .into_iter()
                .filter_map(|(s, p)| flows.get(&s).cloned().map(|f| (s, p, Some(f))))
                .collect()
        }
    };
    if jobs.is_empty() {
        return Err(Error::Dataset(format!("no inputs in {}", input_dir.display())));
    }
    for (stem, path, flow) in &jobs {
        let img = read_rgb(path)?;
        let pred = match flow {
            Some(f) => predictor.predict_video(&img, &read_flo(f)?.to_image())?,
            None => predictor.predict(&img)?,
        };
        let (w, h) = (pred.width, pred.height);
        write_gray(&out_dir.join(format!("{stem}.png")), w, h, &crate::dataio::to_u8(&pred.p3))?;
        if opts.all_outputs {
            write_gray(&out_dir.join(format!("{stem}_p1.png")), w, h, &crate::dataio::to_u8(&pred.p1))?;
            write_gray(&out_dir.join(format!("{stem}_p2.png")), w, h, &crate::dataio::to_u8(&pred.p2))?;
        }
        if opts.regions {
            let mask = BinaryMask::new(w, h, pred.p3.iter().map(|&v| v >= 0.5).collect())?;
            let label = decompose(&mask, DecomposeParams::default())?;
            write_gray(&out_dir.join(format!("{stem}_regions.png")), w, h, &label.palette_image())?;
        }
    }
    Ok(jobs.len())
}

/// Writes a paletted region map `<stem>.png` for every mask in `in_dir`.
pub fn decompose_dir(in_dir: &Path, out_dir: &Path, threshold: u8) -> Result<usize> {
    const EXTS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "pgm", "ppm", "pnm"];
    let masks = files_by_stem(in_dir, &EXTS)?;
    if masks.is_empty() {
        return Err(Error::Dataset(format!("no masks in {}", in_dir.display())));
    }
    for (stem, path) in &masks {
        let m = load_mask(path, threshold)?;
        let label = decompose(&m, DecomposeParams::default())?;
        write_gray(&out_dir.join(format!("{stem}.png")), m.width(), m.height(), &label.palette_image())?;
    }
    Ok(masks.len())
}
