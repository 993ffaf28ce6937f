//! MobileNet-V2 style encoder with taps at strides 4, 8, 16 and 32.

use gapnet_tensor::nn::Conv2dOptions;
use gapnet_tensor::{profile, Real, Var};

use crate::error::{invalid, Result};
use crate::layers::ConvBn;
use crate::params::{Builder, Ctx};

/// One group of inverted-residual blocks; only the first block strides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stages: Vec<BlockSpec>,
    pub width_multiplier: f64,
    /// Index into `stages` of the last group at each output stride.
    pub taps: [usize; 4],
}

const MOBILENET_V2: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

impl BackboneConfig {
    /// Standard MobileNet-V2 layout (without the final 1280-channel conv).
    pub fn paper() -> Self {
        BackboneConfig {
            stem_channels: 32,
            stages: MOBILENET_V2
                .iter()
                .map(|&(expansion, channels, repeats, stride)| BlockSpec {
                    expansion,
                    channels,
                    repeats,
                    stride,
                })
                .collect(),
            width_multiplier: 1.0,
            taps: [1, 2, 4, 6],
        }
    }

    /// Same topology at a quarter of the width.
    pub fn toy() -> Self {
        BackboneConfig {
            width_multiplier: 0.25,
            ..Self::paper()
        }
    }

    pub fn scaled(&self, c: usize) -> usize {
        make_divisible(c as f64 * self.width_multiplier, 8)
    }

    /// Channel counts of the four taps after width scaling.
    pub fn tap_channels(&self) -> [usize; 4] {
        self.taps.map(|i| self.scaled(self.stages[i].channels))
    }

    /// Checks that the taps land exactly on strides 4, 8, 16, 32.
    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(invalid(format!("width multiplier {} must be positive", self.width_multiplier)));
        }
        if self.taps.iter().any(|&t| t >= self.stages.len()) || self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!("taps {:?} must be increasing stage indices", self.taps)));
        }
        let mut stride = 2;
        let mut tap = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if s.repeats == 0 || s.stride == 0 || s.expansion == 0 {
                return Err(invalid(format!("stage {i} has a zero field: {s:?}")));
            }
            stride *= s.stride;
            if tap < 4 && self.taps[tap] == i {
                let want = 4 << tap;
                if stride != want {
                    return Err(invalid(format!("stage {i} ends at stride {stride}, expected {want}")));
                }
                tap += 1;
            }
        }
        if stride != 32 {
            return Err(invalid(format!("encoder ends at stride {stride}, expected 32")));
        }
        Ok(())
    }
}

/// Rounds to the nearest multiple of `divisor`, never dropping more than 10%.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = (((v + d / 2.0) / d).floor() * d).max(d);
    if out < 0.9 * v {
        out += d;
    }
    out as usize
}

#[derive(Debug, Clone)]
pub struct InvertedResidual {
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub project: ConvBn,
    pub residual: bool,
}

impl InvertedResidual {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, stride: usize, expansion: usize) -> Self {
        let hidden = cin * expansion;
        let expand = (expansion != 1).then(|| ConvBn::pointwise(&mut b.sub("expand"), cin, hidden));
        let dw = Conv2dOptions::default().stride(stride).padding(1).groups(hidden);
        InvertedResidual {
            expand,
            depthwise: ConvBn::new(&mut b.sub("dw"), hidden, hidden, 3, dw, true),
            project: ConvBn::new(&mut b.sub("project"), hidden, cout, 1, Conv2dOptions::default(), false),
            residual: stride == 1 && cin == cout,
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x.clone();
        if let Some(e) = &self.expand {
            h = e.forward(ctx, &h)?;
        }
        let h = self.project.forward(ctx, &self.depthwise.forward(ctx, &h)?)?;
        if self.residual {
            Ok(x.add(&h)?)
        } else {
            Ok(h)
        }
    }
}

/// Encoder outputs at strides 4, 8, 16, 32.
#[derive(Debug, Clone)]
pub struct StageFeatures<'t, T: Real> {
    pub e1: Var<'t, T>,
    pub e2: Var<'t, T>,
    pub e3: Var<'t, T>,
    pub e4: Var<'t, T>,
}

impl<'t, T: Real> StageFeatures<'t, T> {
    pub fn as_array(&self) -> [&Var<'t, T>; 4] {
        [&self.e1, &self.e2, &self.e3, &self.e4]
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: ConvBn,
    /// Blocks grouped by stage.
    pub stages: Vec<Vec<InvertedResidual>>,
}

impl Backbone {
    /// Registers parameters as `features.{i}` under the builder's prefix.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let stem_c = cfg.scaled(cfg.stem_channels);
        let stem = ConvBn::new(
            &mut b.sub("features.0"),
            3,
            stem_c,
            3,
            Conv2dOptions::default().stride(2).padding(1),
            true,
        );
        let mut cin = stem_c;
        let mut idx = 1;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for s in &cfg.stages {
            let cout = cfg.scaled(s.channels);
            let mut blocks = Vec::with_capacity(s.repeats);
            for r in 0..s.repeats {
                let stride = if r == 0 { s.stride } else { 1 };
                blocks.push(InvertedResidual::new(&mut b.sub(&format!("features.{idx}")), cin, cout, stride, s.expansion));
                cin = cout;
                idx += 1;
            }
            stages.push(blocks);
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    pub fn encode<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, image: &Var<'t, T>) -> Result<StageFeatures<'t, T>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(invalid(format!("encoder expects [N, 3, H, W], got {s:?}")));
        }
        if !s[2].is_multiple_of(32) || !s[3].is_multiple_of(32) || s[2] == 0 || s[3] == 0 {
            return Err(invalid(format!("input extent {}x{} is not divisible by 32", s[2], s[3])));
        }
        let mut h = self.stem.forward(ctx, image)?;
        let mut taps = Vec::with_capacity(4);
        for (i, blocks) in self.stages.iter().enumerate() {
            for blk in blocks {
                h = blk.forward(ctx, &h)?;
            }
            if self.cfg.taps.contains(&i) {
                taps.push(h.clone());
            }
        }
        let mut it = taps.into_iter();
        let mut next = || it.next().expect("four validated taps");
        Ok(StageFeatures {
            e1: next(),
            e2: next(),
            e3: next(),
            e4: next(),
        })
    }

    /// Same as [`Backbone::encode`], counted under the `backbone` profile scope.
    pub fn encode_scoped<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        image: &Var<'t, T>,
        scope: &'static str,
    ) -> Result<StageFeatures<'t, T>> {
        let _s = profile::scope(scope);
        self.encode(ctx, image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisible_rounding() {
        assert_eq!(make_divisible(32.0, 8), 32);
        assert_eq!(make_divisible(4.0, 8), 8);
        assert_eq!(make_divisible(24.0, 8), 24);
        assert_eq!(make_divisible(40.0, 8), 40);
        assert_eq!(make_divisible(80.0, 8), 80);
        assert_eq!(make_divisible(20.0, 8), 24);
    }

    #[test]
    fn tap_channels_per_preset() {
        assert_eq!(BackboneConfig::paper().tap_channels(), [24, 32, 96, 320]);
        assert_eq!(BackboneConfig::toy().tap_channels(), [8, 8, 24, 80]);
    }

    #[test]
    fn broken_stride_ladder_is_rejected() {
        let mut cfg = BackboneConfig::paper();
        cfg.stages[4].stride = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::paper();
        cfg.taps = [1, 3, 4, 6];
        assert!(cfg.validate().is_err());
    }
}
