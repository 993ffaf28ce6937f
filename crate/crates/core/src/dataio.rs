//! Files in and out: images, masks, `.flo` optical flow, checkpoints,
//! dataset layouts and run configuration.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use gapnet_tensor::kernels::resize_bilinear;
use gapnet_tensor::{Real, Tensor};
use image::ImageReader;

use crate::error::{Error, Result};
use crate::labels::BinaryMask;
use crate::losses::Supervision;
use crate::model::{Mode, ModelConfig};

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet statistics.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    fn apply(&self, planes: &mut [f32], plane: usize) {
        for (c, chunk) in planes.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Decoded image as `[3, H, W]` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub planes: Vec<f32>,
}

impl RgbImage {
    /// Bilinear resize (half-pixel centers) to `height × width`.
    pub fn resized(&self, height: usize, width: usize) -> RgbImage {
        RgbImage {
            width,
            height,
            planes: resize_bilinear(&self.planes, 3, self.height, self.width, height, width),
        }
    }

    /// Horizontal mirror image.
    pub fn flipped(&self) -> RgbImage {
        let (w, h) = (self.width, self.height);
        let mut planes = self.planes.clone();
        for row in planes.chunks_mut(w).take(3 * h) {
            row.reverse();
        }
        RgbImage {
            width: w,
            height: h,
            planes,
        }
    }

    /// Normalized `[1, 3, H, W]` network input.
    pub fn to_tensor(&self, norm: &Normalization) -> Tensor<f32> {
        let mut planes = self.planes.clone();
        norm.apply(&mut planes, self.width * self.height);
        Tensor::new(&[1, 3, self.height, self.width], planes).expect("three planes")
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Reads an 8-bit RGB or grayscale image; gray is replicated to three channels.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = vec![0.0f32; 3 * w * h];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planes[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(RgbImage { width: w, height: h, planes })
}

/// Network input `[1, 3, H, W]` resized to `size = (height, width)`, plus
/// the original `(height, width)`.
pub fn load_image(path: &Path, size: Option<(usize, usize)>, norm: &Normalization) -> Result<(Tensor<f32>, (usize, usize))> {
    let img = read_rgb(path)?;
    let orig = (img.height, img.width);
    let img = match size {
        Some((h, w)) if (h, w) != orig => img.resized(h, w),
        _ => img,
    };
    Ok((img.to_tensor(norm), orig))
}

/// Binarizes a mask at `threshold` (`value >= threshold` is foreground).
/// Color masks are accepted only when all channels agree.
pub fn load_mask(path: &Path, threshold: u8) -> Result<BinaryMask> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut bits = Vec::with_capacity(w * h);
    for px in img.pixels() {
        if px[0] != px[1] || px[1] != px[2] {
            return Err(Error::Image {
                path: path.to_path_buf(),
                msg: "mask channels disagree".into(),
            });
        }
        bits.push(px[0] >= threshold);
    }
    BinaryMask::new(w, h, bits)
}

/// Reads a grayscale map as values in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.pixels().map(|p| p[0] as f64 / 255.0).collect()))
}

/// Writes 8-bit grayscale (PNG unless the extension says otherwise).
pub fn write_gray(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let img = image::GrayImage::from_raw(width as u32, height as u32, data.to_vec()).ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        msg: format!("{} bytes do not fill {width}x{height}", data.len()),
    })?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Probabilities to 8-bit with 255 = salient.
pub fn to_u8(p: &[f64]) -> Vec<u8> {
    p.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub const FLO_MAGIC: f32 = 202021.25;

/// Dense displacement field, `(u, v)` interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub uv: Vec<f32>,
}

impl FlowField {
    /// `[3, H, W]` planes of `u`, `v` and magnitude, each min-max scaled to
    /// `[0, 1]` (constant planes become 0).
    pub fn to_image(&self) -> RgbImage {
        let n = self.width * self.height;
        let mut planes = vec![0.0f32; 3 * n];
        for i in 0..n {
            let (u, v) = (self.uv[2 * i], self.uv[2 * i + 1]);
            planes[i] = u;
            planes[n + i] = v;
            planes[2 * n + i] = (u * u + v * v).sqrt();
        }
        for plane in planes.chunks_mut(n.max(1)) {
            let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            let span = hi - lo;
            for x in plane.iter_mut() {
                *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
            }
        }
        RgbImage {
            width: self.width,
            height: self.height,
            planes,
        }
    }
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_flo(path, &bytes)
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("four bytes"))
}

pub fn parse_flo(path: &Path, bytes: &[u8]) -> Result<FlowField> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(12));
    }
    let magic = f32::from_le_bytes(bytes[..4].try_into().expect("four bytes"));
    if magic != FLO_MAGIC {
        return Err(Error::FlowMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    if bytes.len() < 12 {
        return Err(truncated(12));
    }
    let (w, h) = (le_u32(bytes, 4) as usize, le_u32(bytes, 8) as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::Invalid(format!("{}: flow extent {w}x{h} overflows", path.display())))?;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::Invalid(format!(
            "{}: {} trailing bytes after the flow payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    let uv = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    Ok(FlowField { width: w, height: h, uv })
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * flow.uv.len());
    out.extend(FLO_MAGIC.to_le_bytes());
    out.extend((flow.width as u32).to_le_bytes());
    out.extend((flow.height as u32).to_le_bytes());
    for v in &flow.uv {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

/// Network input built from a flow file: `(u, v, |uv|)` scaled per frame,
/// resized, then normalized like an image.
pub fn load_flow(path: &Path, size: Option<(usize, usize)>, norm: &Normalization) -> Result<Tensor<f32>> {
    let img = read_flo(path)?.to_image();
    let img = match size {
        Some((h, w)) if (h, w) != (img.height, img.width) => img.resized(h, w),
        _ => img,
    };
    Ok(img.to_tensor(norm))
}

const CKPT_MAGIC: &[u8; 4] = b"GAPN";
pub const CKPT_VERSION: u32 = 1;

/// Element types storable in a checkpoint.
pub trait Dtype: Real {
    const CODE: u8;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl Dtype for f32 {
    const CODE: u8 = 0;
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend(self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f32::from_le_bytes(b.try_into().expect("four bytes"))
    }
}

impl Dtype for f64 {
    const CODE: u8 = 1;
    const SIZE: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend(self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f64::from_le_bytes(b.try_into().expect("eight bytes"))
    }
}

pub fn encode_checkpoint<T: Dtype>(tensors: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let ck = |m: String| Error::Checkpoint(m);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend(CKPT_MAGIC);
    out.extend(CKPT_VERSION.to_le_bytes());
    out.extend(u32::try_from(tensors.len()).map_err(|_| ck("too many tensors".into()))?.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(ck(format!("duplicate tensor name {name}")));
        }
        let nb = name.as_bytes();
        out.extend(u16::try_from(nb.len()).map_err(|_| ck(format!("name too long: {name}")))?.to_le_bytes());
        out.extend(nb);
        out.push(u8::try_from(t.rank()).map_err(|_| ck(format!("rank of {name} too large")))?);
        for &d in t.shape() {
            out.extend(u32::try_from(d).map_err(|_| ck(format!("extent of {name} too large")))?.to_le_bytes());
        }
        out.push(T::CODE);
        for &v in t.data() {
            v.put(&mut out);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "length mismatch reading {what}: need {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
}

pub fn decode_checkpoint<T: Dtype>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let ck = |m: String| Error::Checkpoint(m);
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "magic")? != CKPT_MAGIC {
        return Err(ck("not a checkpoint (bad magic)".into()));
    }
    let version = le_u32(c.take(4, "version")?, 0);
    if version != CKPT_VERSION {
        return Err(ck(format!("unsupported checkpoint version {version} (expected {CKPT_VERSION})")));
    }
    let count = le_u32(c.take(4, "count")?, 0) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().expect("two bytes")) as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| ck("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(ck(format!("duplicate tensor name {name}")));
        }
        let rank = c.take(1, "rank")?[0] as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| c.take(4, "extent").map(|b| le_u32(b, 0) as usize))
            .collect::<Result<_>>()?;
        let dtype = c.take(1, "dtype")?[0];
        if dtype != T::CODE {
            return Err(ck(format!("tensor {name} has dtype {dtype}, expected {}", T::CODE)));
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ck(format!("tensor {name} is too large")))?;
        let raw = c.take(n.checked_mul(T::SIZE).ok_or_else(|| ck(format!("tensor {name} is too large")))?, "values")?;
        let data = raw.chunks_exact(T::SIZE).map(T::get).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.at != bytes.len() {
        return Err(ck(format!("length mismatch: {} trailing bytes", bytes.len() - c.at)));
    }
    Ok(out)
}

pub fn write_checkpoint<T: Dtype>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Dtype>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub flow_path: Option<PathBuf>,
    pub clip_id: Option<String>,
    pub frame_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scan {
    pub records: Vec<SampleRecord>,
    /// Files without a partner.
    pub warnings: Vec<String>,
}

const IMAGE_EXTS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "pgm", "ppm", "pnm"];

/// Files in `dir` with an extension in `exts`, keyed by stem.
pub fn files_by_stem(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| exts.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn pair_up(
    images: &BTreeMap<String, PathBuf>,
    masks: &BTreeMap<String, PathBuf>,
    warnings: &mut Vec<String>,
) -> Vec<(String, PathBuf, PathBuf)> {
    for (stem, p) in masks {
        if !images.contains_key(stem) {
            warnings.push(format!("mask without image: {}", p.display()));
        }
    }
    images
        .iter()
        .filter_map(|(stem, img)| match masks.get(stem) {
            Some(m) => Some((stem.clone(), img.clone(), m.clone())),
            None => {
                warnings.push(format!("image without mask: {}", img.display()));
                None
            }
        })
        .collect()
}

/// Lists samples under `root`: `images/` + `masks/` in image mode,
/// `clips/<id>/{frames,flow,masks}` in video mode. Order is lexicographic.
pub fn scan_dataset(root: &Path, mode: Mode) -> Result<Scan> {
    let mut warnings = Vec::new();
    let mut records = Vec::new();
    match mode {
        Mode::Image => {
            let images = files_by_stem(&root.join("images"), &IMAGE_EXTS)?;
            let masks = files_by_stem(&root.join("masks"), &IMAGE_EXTS)?;
            for (_, image_path, mask_path) in pair_up(&images, &masks, &mut warnings) {
                records.push(SampleRecord {
                    image_path,
                    mask_path,
                    flow_path: None,
                    clip_id: None,
                    frame_index: None,
                });
            }
        }
        Mode::Video => {
            let clips_dir = root.join("clips");
            let mut clips: Vec<PathBuf> = fs::read_dir(&clips_dir)
                .map_err(|e| Error::io(&clips_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            clips.sort();
            for clip in clips {
                let id = clip.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let frames = files_by_stem(&clip.join("frames"), &IMAGE_EXTS)?;
                let masks = files_by_stem(&clip.join("masks"), &IMAGE_EXTS)?;
                let flows = files_by_stem(&clip.join("flow"), &["flo"])?;
                let order: Vec<&String> = frames.keys().collect();
                for (stem, image_path, mask_path) in pair_up(&frames, &masks, &mut warnings) {
                    let Some(flow) = flows.get(&stem) else {
                        warnings.push(format!("frame without flow: {}", image_path.display()));
                        continue;
                    };
                    records.push(SampleRecord {
                        image_path,
                        mask_path,
                        flow_path: Some(flow.clone()),
                        clip_id: Some(id.clone()),
                        frame_index: order.iter().position(|s| **s == stem),
                    });
                }
                for (stem, p) in &flows {
                    if !frames.contains_key(stem) {
                        warnings.push(format!("flow without frame: {}", p.display()));
                    }
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no usable samples under {}", root.display())));
    }
    Ok(Scan { records, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Toy,
}

/// Everything a config file can set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub width_multiplier: Option<f64>,
    pub csa_dim: Option<usize>,
    pub csa_heads: Option<usize>,
    pub csa_ffn_expansion: Option<usize>,
    pub gpc_m: usize,
    pub gpc_atrous_rates: [usize; 4],
    pub reduce_channels: Option<[usize; 4]>,
    pub supervision: Supervision,
    pub lr: f64,
    pub lr_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub train_sizes: Vec<usize>,
    pub infer_size: usize,
    pub mode: Mode,
    pub wf_beta2: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Paper,
            width_multiplier: None,
            csa_dim: None,
            csa_heads: None,
            csa_ffn_expansion: None,
            gpc_m: 7,
            gpc_atrous_rates: [8, 4, 2, 1],
            reduce_channels: None,
            supervision: Supervision::F,
            lr: 1.7e-4,
            lr_power: 0.9,
            epochs: 30,
            batch_size: 32,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            seed: 0,
            train_sizes: vec![320, 352, 384],
            infer_size: 384,
            mode: Mode::Image,
            wf_beta2: 1.0,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match self.preset {
            Preset::Paper => ModelConfig::paper(),
            Preset::Toy => ModelConfig::toy(),
        };
        if let Some(w) = self.width_multiplier {
            cfg.backbone.width_multiplier = w;
        }
        if let Some(d) = self.csa_dim {
            cfg.csa.dim = d;
        }
        if let Some(h) = self.csa_heads {
            cfg.csa.heads = h;
        }
        if let Some(e) = self.csa_ffn_expansion {
            cfg.csa.ffn_expansion = e;
        }
        if let Some(r) = self.reduce_channels {
            cfg.reduce_channels = r;
        }
        cfg.gpc.m = self.gpc_m;
        cfg.gpc.atrous_rates = self.gpc_atrous_rates;
        cfg.mode = self.mode;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split([',', ' ', '/'])
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect()
        }
        fn four(key: &str, v: &str) -> Result<[usize; 4]> {
            let l = list(key, v)?;
            l.try_into().map_err(|_| Error::Config(format!("{key}: expected four values, got {v:?}")))
        }
        match key {
            "preset" => {
                self.preset = match value {
                    "paper" => Preset::Paper,
                    "toy" => Preset::Toy,
                    _ => return Err(Error::Config(format!("preset: expected paper or toy, got {value:?}"))),
                }
            }
            "width_multiplier" => self.width_multiplier = Some(num(key, value)?),
            "csa_dim" => self.csa_dim = Some(num(key, value)?),
            "csa_heads" => self.csa_heads = Some(num(key, value)?),
            "csa_ffn_expansion" => self.csa_ffn_expansion = Some(num(key, value)?),
            "gpc_m" => self.gpc_m = num(key, value)?,
            "gpc_atrous_rates" => self.gpc_atrous_rates = four(key, value)?,
            "reduce_channels" => self.reduce_channels = Some(four(key, value)?),
            "supervision_setting" => self.supervision = value.parse()?,
            "lr" => self.lr = num(key, value)?,
            "lr_power" => self.lr_power = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "train_sizes" => self.train_sizes = list(key, value)?,
            "infer_size" => self.infer_size = num(key, value)?,
            "mode" => {
                self.mode = match value {
                    "image" => Mode::Image,
                    "video" => Mode::Video,
                    _ => return Err(Error::Config(format!("mode: expected image or video, got {value:?}"))),
                }
            }
            "wf_beta2" => self.wf_beta2 = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_sizes.is_empty() || self.train_sizes.iter().any(|s| *s == 0 || s % 32 != 0) {
            return bad(format!("train_sizes {:?} must be positive multiples of 32", self.train_sizes));
        }
        if self.infer_size == 0 || !self.infer_size.is_multiple_of(32) {
            return bad(format!("infer_size {} must be a positive multiple of 32", self.infer_size));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return bad(format!("lr {} / weight_decay {} out of range", self.lr, self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment. Unknown keys fail.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.check()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
