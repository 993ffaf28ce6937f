//! Parameterized building blocks shared by the encoder and decoder.

use gapnet_tensor::nn::{self, Conv2dOptions};
use gapnet_tensor::{Real, Var};

use crate::error::Result;
use crate::params::{Builder, Ctx, ParamId, Role, StatsUpdate};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opt: Conv2dOptions,
}

impl Conv {
    /// Square `k×k` convolution with He (fan-in) normal initialization.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, k: usize, opt: Conv2dOptions, bias: bool) -> Self {
        let fan_in = cin / opt.groups * k * k;
        let weight = b.normal("weight", &[cout, cin / opt.groups, k, k], (2.0 / fan_in as f64).sqrt(), Role::Weight);
        let bias = bias.then(|| b.constant("bias", &[cout], 0.0, Role::Bias));
        Conv { weight, bias, opt }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        Ok(nn::conv2d(x, &w, b.as_ref(), &self.opt)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize) -> Self {
        BatchNorm {
            gamma: b.constant("weight", &[c], 1.0, Role::NormScale),
            beta: b.constant("bias", &[c], 0.0, Role::NormShift),
            running_mean: b.constant("running_mean", &[c], 0.0, Role::RunningMean),
            running_var: b.constant("running_var", &[c], 1.0, Role::RunningVar),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        if ctx.train() {
            let (y, stats) = nn::batch_norm2d_train(x, &g, &b, BN_EPS)?;
            ctx.push_stats(StatsUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
            Ok(y)
        } else {
            Ok(nn::batch_norm2d_eval(
                x,
                &g,
                &b,
                ctx.value(self.running_mean),
                ctx.value(self.running_var),
                BN_EPS,
            )?)
        }
    }
}

/// Convolution, batch norm, optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, k: usize, opt: Conv2dOptions, relu: bool) -> Self {
        ConvBn {
            conv: Conv::new(&mut b.sub("conv"), cin, cout, k, opt, false),
            bn: BatchNorm::new(&mut b.sub("bn"), cout),
            relu,
        }
    }

    /// 1×1 convolution + batch norm + ReLU, the decoder's channel adapter.
    pub fn pointwise<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize) -> Self {
        Self::new(b, cin, cout, 1, Conv2dOptions::default(), true)
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.bn.forward(ctx, &self.conv.forward(ctx, x)?)?;
        if self.relu {
            Ok(y.relu()?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize) -> Self {
        LayerNorm {
            gamma: b.constant("weight", &[c], 1.0, Role::NormScale),
            beta: b.constant("bias", &[c], 0.0, Role::NormShift),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(nn::layer_norm(x, &ctx.param(self.gamma), &ctx.param(self.beta), LN_EPS)?)
    }
}

/// `x·W + b` with `W: [cin, cout]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Fan-in scaled normal weights, zero bias.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize) -> Self {
        Linear {
            weight: b.normal("weight", &[cin, cout], (1.0 / cin as f64).sqrt(), Role::Weight),
            bias: b.constant("bias", &[cout], 0.0, Role::Bias),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(nn::linear(x, &ctx.param(self.weight), Some(&ctx.param(self.bias)))?)
    }
}
