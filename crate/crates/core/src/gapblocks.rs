//! The attention core, granular pyramid convolution (GPC), cross-scale
//! attention (CSA) and the global feature extractor (GFE).

use gapnet_tensor::nn::{self, Conv2dOptions};
use gapnet_tensor::{profile, Real, Var};

use crate::error::{invalid, Result};
use crate::layers::{Conv, ConvBn, LayerNorm, Linear};
use crate::params::{check_divisible, Builder, Ctx};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn d_k(&self) -> usize {
        self.dim / self.heads
    }
}

/// `Linear(softmax(QKᵀ/√d_k)·V)` with per-head scaled dot products.
#[derive(Debug, Clone)]
pub struct Attention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: AttentionConfig) -> Result<Self> {
        if cfg.heads == 0 {
            return Err(invalid("attention needs at least one head"));
        }
        check_divisible("attention dim", cfg.dim, cfg.heads)?;
        Ok(Attention {
            cfg,
            q: Linear::new(&mut b.sub("q"), cfg.dim, cfg.dim),
            k: Linear::new(&mut b.sub("k"), cfg.dim, cfg.dim),
            v: Linear::new(&mut b.sub("v"), cfg.dim, cfg.dim),
            out: Linear::new(&mut b.sub("out"), cfg.dim, cfg.dim),
        })
    }

    fn heads<'t, T: Real>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (h, dk) = (self.cfg.heads, self.cfg.d_k());
        Ok(x.reshape(&[s[0], s[1], h, dk])?.permute(&[0, 2, 1, 3])?)
    }

    /// Self-attention over `x: [N, L, dim]`.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.attend(ctx, x, x)?.0)
    }

    /// Queries from `q_in: [N, Lq, dim]`, keys and values from `kv_in: [N, Lk, dim]`.
    /// Also returns the attention-matrix shape `[N, heads, Lq, Lk]`.
    pub fn attend<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        q_in: &Var<'t, T>,
        kv_in: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, Vec<usize>)> {
        let (qs, ks) = (q_in.shape(), kv_in.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[2] != self.cfg.dim || ks[2] != self.cfg.dim || qs[0] != ks[0] {
            return Err(invalid(format!(
                "attention dim {} does not fit query {qs:?} / key {ks:?}",
                self.cfg.dim
            )));
        }
        let _s = profile::scope("attention");
        let (n, lq) = (qs[0], qs[1]);
        let q = self.heads(&self.q.forward(ctx, q_in)?)?;
        let k = self.heads(&self.k.forward(ctx, kv_in)?)?;
        let v = self.heads(&self.v.forward(ctx, kv_in)?)?;
        let (mixed, shape) = {
            let _m = profile::scope("scores");
            let scores = q.matmul(&k.transpose_last()?)?.scale(1.0 / (self.cfg.d_k() as f64).sqrt())?;
            let shape = scores.shape().to_vec();
            (scores.softmax()?.matmul(&v)?, shape)
        };
        let merged = mixed.permute(&[0, 2, 1, 3])?.reshape(&[n, lq, self.cfg.dim])?;
        Ok((self.out.forward(ctx, &merged)?, shape))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpcConfig {
    pub channels: usize,
    /// Side of the pooled grid the attention branch runs on.
    pub m: usize,
    /// Channel split as fractions `1/d` of `channels`.
    pub split_denominators: [usize; 4],
    pub atrous_rates: [usize; 4],
    pub heads: usize,
    /// Disables the pooled attention branch entirely.
    pub attention: bool,
    /// Adds the pooled features back onto the attention output before
    /// upsampling (`F_ds + Attention(LN(F_ds))`).
    pub pool_residual: bool,
}

impl GpcConfig {
    pub fn new(channels: usize) -> Self {
        GpcConfig {
            channels,
            m: 7,
            split_denominators: [8, 8, 4, 2],
            atrous_rates: [8, 4, 2, 1],
            heads: 1,
            attention: true,
            pool_residual: false,
        }
    }

    pub fn split_sizes(&self) -> Result<[usize; 4]> {
        let mut sizes = [0; 4];
        for (s, &d) in sizes.iter_mut().zip(&self.split_denominators) {
            check_divisible("gpc channels", self.channels, d)?;
            *s = self.channels / d;
        }
        if sizes.iter().sum::<usize>() != self.channels {
            return Err(invalid(format!(
                "gpc split {:?} does not cover {} channels",
                self.split_denominators, self.channels
            )));
        }
        Ok(sizes)
    }
}

/// Granular pyramid convolution: dilated split convolutions plus attention
/// on an adaptively pooled grid, with an outer residual.
#[derive(Debug, Clone)]
pub struct Gpc {
    pub cfg: GpcConfig,
    pub sizes: [usize; 4],
    pub norm: Option<LayerNorm>,
    pub attn: Option<Attention>,
    pub branches: Vec<ConvBn>,
    pub fuse: Conv,
}

impl Gpc {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &GpcConfig) -> Result<Self> {
        check_divisible("gpc channels", cfg.channels, 8)?;
        if cfg.m == 0 {
            return Err(invalid("gpc pooling size m must be at least 1"));
        }
        let sizes = cfg.split_sizes()?;
        let (norm, attn) = if cfg.attention {
            let acfg = AttentionConfig {
                dim: cfg.channels,
                heads: cfg.heads,
            };
            (Some(LayerNorm::new(&mut b.sub("attn_norm"), cfg.channels)), Some(Attention::new(&mut b.sub("attn"), acfg)?))
        } else {
            (None, None)
        };
        let branches = sizes
            .iter()
            .zip(&cfg.atrous_rates)
            .enumerate()
            .map(|(i, (&c, &rate))| {
                let opt = Conv2dOptions::default().padding(rate).dilation(rate);
                ConvBn::new(&mut b.sub(&format!("branch{i}")), c, c, 3, opt, false)
            })
            .collect();
        let fuse = Conv::new(&mut b.sub("fuse"), cfg.channels, cfg.channels, 1, Conv2dOptions::default(), true);
        Ok(Gpc {
            cfg: cfg.clone(),
            sizes,
            norm,
            attn,
            branches,
            fuse,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.channels {
            return Err(invalid(format!("gpc expects {} channels, got {s:?}", self.cfg.channels)));
        }
        let (h, w) = (s[2], s[3]);
        let conv = {
            let _c = profile::scope("pyramid");
            let parts = x.split(&self.sizes, 1)?;
            let outs = parts
                .iter()
                .zip(&self.branches)
                .map(|(p, br)| br.forward(ctx, p))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = outs.iter().collect();
            self.fuse.forward(ctx, &Var::concat(&refs, 1)?)?
        };
        let (Some(norm), Some(attn)) = (&self.norm, &self.attn) else {
            return Ok(conv.add(x)?);
        };
        let m = self.cfg.m;
        if m > h.min(w) {
            return Err(invalid(format!("gpc pooling size {m} exceeds feature extent {h}x{w}")));
        }
        let _a = profile::scope("pooled_attention");
        let pooled = nn::to_tokens(&nn::adaptive_avg_pool2d(x, m)?)?;
        let mut a = attn.forward(ctx, &norm.forward(ctx, &pooled)?)?;
        if self.cfg.pool_residual {
            a = pooled.add(&a)?;
        }
        let a = nn::upsample_bilinear(&nn::from_tokens(&a, m, m)?, (h, w))?;
        Ok(a.add(&conv)?.add(x)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsaConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    /// Draws keys and values from the concatenated stream as in plain
    /// self-attention; used only for cost comparisons.
    pub vanilla: bool,
}

impl CsaConfig {
    pub fn new(dim: usize) -> Self {
        CsaConfig {
            dim,
            heads: 1,
            ffn_expansion: 4,
            vanilla: false,
        }
    }
}

/// Cross-scale attention: queries from both streams, keys and values from
/// the coarse stream only, followed by a residual two-layer FFN.
#[derive(Debug, Clone)]
pub struct Csa {
    pub cfg: CsaConfig,
    pub proj_fine: Linear,
    pub proj_coarse: Linear,
    pub norm: LayerNorm,
    pub attn: Attention,
    pub ffn_norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Token bookkeeping of one CSA call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsaTrace {
    pub q_len: usize,
    pub kv_len: usize,
    pub attention_shape: Vec<usize>,
}

impl Csa {
    /// `c_fine`, `c_coarse`: channel counts of the two input streams.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c_fine: usize, c_coarse: usize, cfg: CsaConfig) -> Result<Self> {
        let hidden = cfg.dim * cfg.ffn_expansion;
        Ok(Csa {
            cfg,
            proj_fine: Linear::new(&mut b.sub("proj_fine"), c_fine, cfg.dim),
            proj_coarse: Linear::new(&mut b.sub("proj_coarse"), c_coarse, cfg.dim),
            norm: LayerNorm::new(&mut b.sub("norm"), cfg.dim),
            attn: Attention::new(
                &mut b.sub("attn"),
                AttentionConfig {
                    dim: cfg.dim,
                    heads: cfg.heads,
                },
            )?,
            ffn_norm: LayerNorm::new(&mut b.sub("ffn_norm"), cfg.dim),
            fc1: Linear::new(&mut b.sub("fc1"), cfg.dim, hidden),
            fc2: Linear::new(&mut b.sub("fc2"), hidden, cfg.dim),
        })
    }

    /// Fuses projected tokens `x1: [N, L1, dim]` and `x2: [N, L2, dim]` into
    /// `[N, L1 + L2, dim]`.
    pub fn forward_tokens<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x1: &Var<'t, T>,
        x2: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, CsaTrace)> {
        let (s1, s2) = (x1.shape(), x2.shape());
        if s1.len() != 3 || s2.len() != 3 || s1[2] != self.cfg.dim || s2[2] != self.cfg.dim || s1[0] != s2[0] {
            return Err(invalid(format!(
                "csa streams {s1:?} and {s2:?} must both be [N, L, {}]",
                self.cfg.dim
            )));
        }
        let (l1, l2) = (s1[1], s2[1]);
        let x = Var::concat(&[x1, x2], 1)?;
        let xn = self.norm.forward(ctx, &x)?;
        let kv = if self.cfg.vanilla { xn.clone() } else { xn.narrow(1, l1, l2)? };
        let (a, attention_shape) = self.attn.attend(ctx, &xn, &kv)?;
        let y = x.add(&a)?;
        let ff = {
            let _f = profile::scope("ffn");
            let h = self.fc1.forward(ctx, &self.ffn_norm.forward(ctx, &y)?)?.relu()?;
            self.fc2.forward(ctx, &h)?
        };
        let trace = CsaTrace {
            q_len: l1 + l2,
            kv_len: kv.shape()[1],
            attention_shape,
        };
        Ok((y.add(&ff)?, trace))
    }

    /// Fuses a fine map `[N, C1, h1, w1]` with a coarse map `[N, C2, h2, w2]`
    /// and folds the tokens back onto the fine grid: fine tokens in place
    /// plus the upsampled coarse tokens. Output `[N, dim, h1, w1]`.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        fine: &Var<'t, T>,
        coarse: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, CsaTrace)> {
        let (sf, sc) = (fine.shape().to_vec(), coarse.shape().to_vec());
        if sf.len() != 4 || sc.len() != 4 {
            return Err(invalid(format!("csa expects two [N, C, H, W] maps, got {sf:?} and {sc:?}")));
        }
        let (h1, w1, h2, w2) = (sf[2], sf[3], sc[2], sc[3]);
        let t1 = self.proj_fine.forward(ctx, &nn::to_tokens(fine)?)?;
        let t2 = self.proj_coarse.forward(ctx, &nn::to_tokens(coarse)?)?;
        let (out, trace) = self.forward_tokens(ctx, &t1, &t2)?;
        let l1 = h1 * w1;
        let f = nn::from_tokens(&out.narrow(1, 0, l1)?, h1, w1)?;
        let c = nn::from_tokens(&out.narrow(1, l1, h2 * w2)?, h2, w2)?;
        Ok((f.add(&nn::upsample_bilinear(&c, (h1, w1))?)?, trace))
    }
}

/// Transformer block over the stride-32 features: attention then an
/// inverted-residual feed-forward, each with a residual.
#[derive(Debug, Clone)]
pub struct Gfe {
    pub channels: usize,
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub project: ConvBn,
}

impl Gfe {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize, heads: usize, expansion: usize) -> Result<Self> {
        let hidden = channels * expansion;
        Ok(Gfe {
            channels,
            norm1: LayerNorm::new(&mut b.sub("norm1"), channels),
            attn: Attention::new(&mut b.sub("attn"), AttentionConfig { dim: channels, heads })?,
            norm2: LayerNorm::new(&mut b.sub("norm2"), channels),
            expand: ConvBn::pointwise(&mut b.sub("ffn.expand"), channels, hidden),
            depthwise: ConvBn::new(
                &mut b.sub("ffn.dw"),
                hidden,
                hidden,
                3,
                Conv2dOptions::default().padding(1).groups(hidden),
                true,
            ),
            project: ConvBn::new(&mut b.sub("ffn.project"), hidden, channels, 1, Conv2dOptions::default(), false),
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, e4: &Var<'t, T>) -> Result<Var<'t, T>> {
        let s = e4.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(invalid(format!("gfe expects {} channels, got {s:?}", self.channels)));
        }
        let (h, w) = (s[2], s[3]);
        let t = nn::to_tokens(e4)?;
        let att = t.add(&self.attn.forward(ctx, &self.norm1.forward(ctx, &t)?)?)?;
        let ff_in = nn::from_tokens(&self.norm2.forward(ctx, &att)?, h, w)?;
        let ff = {
            let _f = profile::scope("ffn");
            let x = self.expand.forward(ctx, &ff_in)?;
            self.project.forward(ctx, &self.depthwise.forward(ctx, &x)?)?
        };
        Ok(nn::from_tokens(&att, h, w)?.add(&ff)?)
    }
}
