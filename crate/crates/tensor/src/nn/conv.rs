use crate::error::{invalid, Result, TensorError};
use crate::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::profile::{self, MacKind};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Stride, zero padding, dilation and grouping of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

/// Cross-correlation of `x: [N, Cin, H, W]` with `weight: [Cout, Cin/groups, kh, kw]`.
pub fn conv2d<'t, T: Real>(
    x: &Var<'t, T>,
    weight: &Var<'t, T>,
    bias: Option<&Var<'t, T>>,
    opt: &Conv2dOptions,
) -> Result<Var<'t, T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv2d",
        lhs: xs.to_vec(),
        rhs: ws.to_vec(),
    };
    if xs.len() != 4 || ws.len() != 4 {
        return Err(mismatch());
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let groups = opt.groups;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(mismatch());
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let degenerate = || invalid("conv2d", format!("degenerate output for input {h}x{w}, kernel {kh}x{kw}, {opt:?}"));
    if kh == 0 || kw == 0 || opt.dilation.0 == 0 || opt.dilation.1 == 0 {
        return Err(degenerate());
    }
    let out_h = ConvGeom::out_extent(h, kh, opt.stride.0, opt.padding.0, opt.dilation.0).ok_or_else(degenerate)?;
    let out_w = ConvGeom::out_extent(w, kw, opt.stride.1, opt.padding.1, opt.dilation.1).ok_or_else(degenerate)?;
    let g = ConvGeom {
        in_h: h,
        in_w: w,
        out_h,
        out_w,
        kh,
        kw,
        sh: opt.stride.0,
        sw: opt.stride.1,
        ph: opt.padding.0,
        pw: opt.padding.1,
        dh: opt.dilation.0,
        dw: opt.dilation.1,
    };
    profile::record(MacKind::Conv, (n * cout * out_h * out_w * cin_g * kh * kw) as u64);
    let xv = x.value().clone();
    let wv = weight.value().clone();
    let out = conv2d_forward(xv.data(), n, cin, wv.data(), cout, bias.map(|b| b.value().data()), groups, &g);
    let value = Tensor::from_parts(vec![n, cout, out_h, out_w], out);
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    Var::record("conv2d", &inputs, value, move |dy, needs| {
        let need_b = needs.get(2).copied().unwrap_or(false);
        let (dx, dw, db) = conv2d_backward(
            xv.data(),
            n,
            cin,
            wv.data(),
            cout,
            groups,
            &g,
            dy.data(),
            (needs[0], needs[1], need_b),
        );
        let mut grads = vec![
            dx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
        ];
        if needs.len() == 3 {
            grads.push(db.map(|d| Tensor::from_parts(vec![cout], d)));
        }
        grads
    })
}
