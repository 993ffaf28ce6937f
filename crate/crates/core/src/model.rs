//! Full network: encoder, granularity-aware decoder, side-output heads, the
//! two-stream video variant, and parameter / MAC accounting.

use std::collections::BTreeMap;

use gapnet_tensor::nn::{self, Conv2dOptions};
use gapnet_tensor::profile::{self, MacReport, Session};
use gapnet_tensor::{Real, Tensor, Var};

use crate::backbone::{Backbone, BackboneConfig, StageFeatures};
use crate::error::{invalid, Result};
use crate::gapblocks::{Csa, CsaConfig, CsaTrace, Gfe, Gpc, GpcConfig};
use crate::layers::{Conv, ConvBn};
use crate::params::{init_rng, Builder, Ctx, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Image,
    Video,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Widths after the 1×1 reduction applied to E1..E4.
    pub reduce_channels: [usize; 4],
    /// Shared by the three GPC sites; `gpc.channels` is the site width.
    pub gpc: GpcConfig,
    pub csa: CsaConfig,
    pub gfe_heads: usize,
    pub gfe_expansion: usize,
    pub mode: Mode,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            backbone: BackboneConfig::paper(),
            reduce_channels: [16, 24, 32, 32],
            gpc: GpcConfig::new(48),
            csa: CsaConfig::new(64),
            gfe_heads: 1,
            gfe_expansion: 4,
            mode: Mode::Image,
        }
    }

    /// Quarter-width encoder with a matching narrow decoder, for fast tests.
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            reduce_channels: [8, 8, 16, 16],
            gpc: GpcConfig::new(16),
            csa: CsaConfig::new(16),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.reduce_channels.contains(&0) {
            return Err(invalid(format!("reduce channels {:?} must be positive", self.reduce_channels)));
        }
        self.gpc.split_sizes()?;
        if self.csa.dim == 0 || self.csa.heads == 0 || !self.csa.dim.is_multiple_of(self.csa.heads) {
            return Err(invalid(format!(
                "csa dim {} must be a positive multiple of {} heads",
                self.csa.dim, self.csa.heads
            )));
        }
        if self.gfe_heads == 0 || !self.reduce_channels[3].is_multiple_of(self.gfe_heads) {
            return Err(invalid(format!(
                "gfe width {} is not divisible by {} heads",
                self.reduce_channels[3], self.gfe_heads
            )));
        }
        Ok(())
    }
}

/// 1×1 ConvBnReLU to the site width followed by a GPC block.
#[derive(Debug, Clone)]
pub struct GpcSite {
    pub proj: ConvBn,
    pub block: Gpc,
}

impl GpcSite {
    fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, cfg: &GpcConfig) -> Result<Self> {
        Ok(GpcSite {
            proj: ConvBn::pointwise(&mut b.sub("proj"), cin, cfg.channels),
            block: Gpc::new(&mut b.sub("block"), cfg)?,
        })
    }

    fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, parts: &[&Var<'t, T>]) -> Result<Var<'t, T>> {
        let x = self.proj.forward(ctx, &Var::concat(parts, 1)?)?;
        self.block.forward(ctx, &x)
    }
}

/// Single-channel side-output head: 1×1 conv, upsample, sigmoid.
#[derive(Debug, Clone)]
pub struct Head {
    pub conv: Conv,
}

impl Head {
    fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize) -> Self {
        Head {
            conv: Conv::new(b, cin, 1, 1, Conv2dOptions::default(), true),
        }
    }

    fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>, size: (usize, usize)) -> Result<Var<'t, T>> {
        let logits = self.conv.forward(ctx, x)?;
        Ok(nn::upsample_bilinear(&logits, size)?.sigmoid()?)
    }
}

/// Cross-scale fusion of an RGB stage with the matching flow stage, added
/// back onto the RGB features.
#[derive(Debug, Clone)]
pub struct StageFusion {
    pub csa: Csa,
    pub back: Conv,
}

impl StageFusion {
    fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, cfg: CsaConfig) -> Result<Self> {
        Ok(StageFusion {
            csa: Csa::new(&mut b.sub("csa"), c, c, cfg)?,
            back: Conv::new(&mut b.sub("back"), cfg.dim, c, 1, Conv2dOptions::default(), true),
        })
    }

    fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, rgb: &Var<'t, T>, flow: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (fused, _) = self.csa.forward(ctx, rgb, flow)?;
        Ok(rgb.add(&self.back.forward(ctx, &fused)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct VideoBranch {
    pub flow: Backbone,
    pub fuse3: StageFusion,
    pub fuse4: StageFusion,
}

/// Probability maps at input resolution and the decoder features they come from.
#[derive(Debug, Clone)]
pub struct ModelOutputs<'t, T: Real> {
    pub p1: Var<'t, T>,
    pub p2: Var<'t, T>,
    pub p3: Var<'t, T>,
    pub d1: Var<'t, T>,
    pub d2: Var<'t, T>,
    pub d3: Var<'t, T>,
    /// Heads on D_L, D_H and G_f, present when requested.
    pub aux: Option<AuxOutputs<'t, T>>,
    /// Token bookkeeping of the two CSA sites (`csa_high`, `csa_2`).
    pub csa: [CsaTrace; 2],
}

#[derive(Debug, Clone)]
pub struct AuxOutputs<'t, T: Real> {
    pub p_low: Var<'t, T>,
    pub p_high: Var<'t, T>,
    pub p_global: Var<'t, T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Also evaluate the auxiliary heads on D_L, D_H and G_f.
    pub aux_heads: bool,
    /// Skip the flow stream so the video path reduces to the image path.
    pub bypass_flow: bool,
}

#[derive(Debug, Clone)]
pub struct Gapnet {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub reduce: [ConvBn; 4],
    pub gfe: Gfe,
    pub gpc_low: GpcSite,
    pub csa_high: Csa,
    pub gpc_1: GpcSite,
    pub csa_2: Csa,
    pub gpc_3: GpcSite,
    pub head_1: Head,
    pub head_2: Head,
    pub head_3: Head,
    pub head_low: Head,
    pub head_high: Head,
    pub head_global: Head,
    pub video: Option<VideoBranch>,
}

/// Parameter prefixes of the reported components.
pub const COMPONENTS: [(&str, &[&str]); 7] = [
    ("backbone", &["backbone."]),
    ("reduce", &["decoder.reduce"]),
    ("gfe", &["decoder.gfe."]),
    ("gpc_sites", &["decoder.gpc_low.", "decoder.gpc_1.", "decoder.gpc_3."]),
    ("csa_sites", &["decoder.csa_high.", "decoder.csa_2."]),
    ("heads", &["heads."]),
    ("video", &["flow.", "fusion."]),
];

impl Gapnet {
    /// Builds the model and its parameters. Image-mode parameters are drawn
    /// first, so image and video models sharing a seed agree on them.
    pub fn build<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        let mut root = Builder::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut root.sub("backbone"), &cfg.backbone)?;
        let taps = cfg.backbone.tap_channels();
        let r = cfg.reduce_channels;
        let g = cfg.gpc.channels;
        let d = cfg.csa.dim;
        let mut dec = root.sub("decoder");
        let reduce = [0, 1, 2, 3].map(|i| ConvBn::pointwise(&mut dec.sub(&format!("reduce{}", i + 1)), taps[i], r[i]));
        let gfe = Gfe::new(&mut dec.sub("gfe"), r[3], cfg.gfe_heads, cfg.gfe_expansion)?;
        let gpc_low = GpcSite::new(&mut dec.sub("gpc_low"), r[1] + r[0], &cfg.gpc)?;
        let csa_high = Csa::new(&mut dec.sub("csa_high"), r[2], r[3], cfg.csa)?;
        let gpc_1 = GpcSite::new(&mut dec.sub("gpc_1"), r[3] + g, &cfg.gpc)?;
        let csa_2 = Csa::new(&mut dec.sub("csa_2"), d, r[3], cfg.csa)?;
        let gpc_3 = GpcSite::new(&mut dec.sub("gpc_3"), d + g, &cfg.gpc)?;
        drop(dec);
        let mut heads = root.sub("heads");
        let head_1 = Head::new(&mut heads.sub("p1"), g);
        let head_2 = Head::new(&mut heads.sub("p2"), d);
        let head_3 = Head::new(&mut heads.sub("p3"), g);
        let head_low = Head::new(&mut heads.sub("low"), g);
        let head_high = Head::new(&mut heads.sub("high"), d);
        let head_global = Head::new(&mut heads.sub("global"), r[3]);
        drop(heads);
        let video = match cfg.mode {
            Mode::Image => None,
            Mode::Video => {
                let flow = Backbone::new(&mut root.sub("flow"), &cfg.backbone)?;
                let mut fusion = root.sub("fusion");
                Some(VideoBranch {
                    flow,
                    fuse3: StageFusion::new(&mut fusion.sub("stage3"), taps[2], cfg.csa)?,
                    fuse4: StageFusion::new(&mut fusion.sub("stage4"), taps[3], cfg.csa)?,
                })
            }
        };
        let model = Gapnet {
            cfg: cfg.clone(),
            backbone,
            reduce,
            gfe,
            gpc_low,
            csa_high,
            gpc_1,
            csa_2,
            gpc_3,
            head_1,
            head_2,
            head_3,
            head_low,
            head_high,
            head_global,
            video,
        };
        Ok((model, store))
    }

    pub fn forward_image<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        image: &Var<'t, T>,
        opts: ForwardOptions,
    ) -> Result<ModelOutputs<'t, T>> {
        let feats = self.backbone.encode_scoped(ctx, image, "backbone")?;
        self.decode(ctx, &feats, image_size(image), opts)
    }

    /// Two-stream forward. `flow` is `[N, 2 or 3, H, W]`; a two-channel
    /// field gains a magnitude channel.
    pub fn forward_video<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        rgb: &Var<'t, T>,
        flow: &Var<'t, T>,
        opts: ForwardOptions,
    ) -> Result<ModelOutputs<'t, T>> {
        let Some(video) = &self.video else {
            return Err(invalid("forward_video needs a model built in video mode"));
        };
        let (rs, fs) = (rgb.shape(), flow.shape());
        if fs.len() != 4 || rs.len() != 4 || fs[0] != rs[0] || fs[2..] != rs[2..] || !(fs[1] == 2 || fs[1] == 3) {
            return Err(invalid(format!("flow {fs:?} does not pair with frame {rs:?}")));
        }
        let feats = self.backbone.encode_scoped(ctx, rgb, "backbone")?;
        if opts.bypass_flow {
            return self.decode(ctx, &feats, image_size(rgb), opts);
        }
        let flow = if fs[1] == 2 { Var::constant(with_magnitude(flow.value())) } else { flow.clone() };
        let ff = video.flow.encode_scoped(ctx, &flow, "flow")?;
        let fused = {
            let _s = profile::scope("fusion");
            StageFeatures {
                e1: fuse_low_video(&feats.e1, &ff.e1)?,
                e2: fuse_low_video(&feats.e2, &ff.e2)?,
                e3: video.fuse3.forward(ctx, &feats.e3, &ff.e3)?,
                e4: video.fuse4.forward(ctx, &feats.e4, &ff.e4)?,
            }
        };
        self.decode(ctx, &fused, image_size(rgb), opts)
    }

    fn decode<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        f: &StageFeatures<'t, T>,
        size: (usize, usize),
        opts: ForwardOptions,
    ) -> Result<ModelOutputs<'t, T>> {
        let _d = profile::scope("decoder");
        let [g1, g2, g3, g4] = {
            let _s = profile::scope("reduce");
            let e = f.as_array();
            [0, 1, 2, 3].map(|i| self.reduce[i].forward(ctx, e[i]))
        };
        let (g1, g2, g3, g4) = (g1?, g2?, g3?, g4?);
        let s4 = spatial(&g1);
        let gf = {
            let _s = profile::scope("gfe");
            self.gfe.forward(ctx, &g4)?
        };
        let d_low = {
            let _s = profile::scope("gpc_low");
            self.gpc_low.forward(ctx, &[&nn::upsample_bilinear(&g2, s4)?, &g1])?
        };
        let d_high = {
            let _s = profile::scope("csa_high");
            self.csa_high.forward(ctx, &g3, &g4)?
        };
        let (d_high, trace_high) = d_high;
        let d1 = {
            let _s = profile::scope("gpc_1");
            self.gpc_1.forward(ctx, &[&nn::upsample_bilinear(&gf, s4)?, &d_low])?
        };
        let d2 = {
            let _s = profile::scope("csa_2");
            self.csa_2.forward(ctx, &d_high, &gf)?
        };
        let (d2, trace_2) = d2;
        let d3 = {
            let _s = profile::scope("gpc_3");
            self.gpc_3.forward(ctx, &[&nn::upsample_bilinear(&d2, s4)?, &d1])?
        };
        drop(_d);
        let _h = profile::scope("heads");
        let aux = if opts.aux_heads {
            Some(AuxOutputs {
                p_low: self.head_low.forward(ctx, &d_low, size)?,
                p_high: self.head_high.forward(ctx, &d_high, size)?,
                p_global: self.head_global.forward(ctx, &gf, size)?,
            })
        } else {
            None
        };
        Ok(ModelOutputs {
            p1: self.head_1.forward(ctx, &d1, size)?,
            p2: self.head_2.forward(ctx, &d2, size)?,
            p3: self.head_3.forward(ctx, &d3, size)?,
            d1,
            d2,
            d3,
            aux,
            csa: [trace_high, trace_2],
        })
    }
}

fn image_size<T: Real>(x: &Var<'_, T>) -> (usize, usize) {
    let s = x.shape();
    (s[2], s[3])
}

fn spatial<T: Real>(x: &Var<'_, T>) -> (usize, usize) {
    image_size(x)
}

/// Appends `sqrt(u² + v²)` to a two-channel flow tensor.
pub fn with_magnitude<T: Real>(flow: &Tensor<T>) -> Tensor<T> {
    let s = flow.shape();
    let (n, plane) = (s[0], s[2] * s[3]);
    let d = flow.data();
    let mut out = Vec::with_capacity(n * 3 * plane);
    for b in 0..n {
        let (u, v) = (&d[(2 * b) * plane..(2 * b + 1) * plane], &d[(2 * b + 1) * plane..(2 * b + 2) * plane]);
        out.extend_from_slice(u);
        out.extend_from_slice(v);
        out.extend(u.iter().zip(v).map(|(&a, &b)| (a * a + b * b).sqrt()));
    }
    Tensor::new(&[n, 3, s[2], s[3]], out).expect("three channels")
}

/// Low-level two-stream fusion: `rgb·σ(flow) + rgb + flow`.
pub fn fuse_low_video<'t, T: Real>(rgb: &Var<'t, T>, flow: &Var<'t, T>) -> Result<Var<'t, T>> {
    if rgb.shape() != flow.shape() {
        return Err(invalid(format!(
            "fusion streams differ: {:?} vs {:?}",
            rgb.shape(),
            flow.shape()
        )));
    }
    Ok(rgb.mul(&flow.sigmoid()?)?.add(rgb)?.add(flow)?)
}

/// Trainable scalar counts per component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub components: BTreeMap<String, usize>,
    /// Per decoder site (`decoder.gpc_low`, `decoder.csa_high`, ...).
    pub sites: BTreeMap<String, usize>,
    pub total: usize,
}

impl ParamBreakdown {
    pub fn get(&self, component: &str) -> usize {
        self.components.get(component).copied().unwrap_or(0)
    }
}

pub const SITES: [&str; 5] = [
    "decoder.gpc_low",
    "decoder.csa_high",
    "decoder.gpc_1",
    "decoder.csa_2",
    "decoder.gpc_3",
];

pub fn count_params<T: Real>(store: &ParamStore<T>) -> ParamBreakdown {
    let components = COMPONENTS
        .iter()
        .map(|(name, prefixes)| (name.to_string(), prefixes.iter().map(|p| store.count(p)).sum()))
        .collect();
    let sites = SITES
        .iter()
        .map(|s| (s.to_string(), store.count(&format!("{s}."))))
        .collect();
    ParamBreakdown {
        components,
        sites,
        total: store.count(""),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacBreakdown {
    pub input: (usize, usize),
    pub report: MacReport,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.report.total()
    }

    /// Twice the MAC count, the "FLOPs" convention of some tools.
    pub fn flops(&self) -> u64 {
        2 * self.total()
    }

    /// MACs per top-level component (`backbone`, `decoder/gpc_1`, ...).
    pub fn by_component(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for (k, v) in self.report.grouped(2) {
            let key = if k.starts_with("decoder") || k.starts_with("heads") { k } else { k.split('/').next().unwrap_or("").to_string() };
            *out.entry(key).or_insert(0) += v;
        }
        out
    }
}

/// Counts MACs of one single-image forward at `size` by running it.
pub fn count_macs(model: &Gapnet, store: &ParamStore<f32>, size: (usize, usize)) -> Result<MacBreakdown> {
    let ctx = Ctx::inference(store);
    let image = Var::constant(Tensor::zeros(&[1, 3, size.0, size.1]));
    let session = Session::start();
    match model.cfg.mode {
        Mode::Image => model.forward_image(&ctx, &image, ForwardOptions::default())?,
        Mode::Video => {
            let flow = Var::constant(Tensor::zeros(&[1, 3, size.0, size.1]));
            model.forward_video(&ctx, &image, &flow, ForwardOptions::default())?
        }
    };
    Ok(MacBreakdown {
        input: size,
        report: session.finish(),
    })
}
