use crate::error::{invalid, Result};
use crate::kernels::{resize_bilinear, resize_bilinear_backward};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Bilinear resampling of `[N, C, H, W]` to `[N, C, oh, ow]` with half-pixel
/// centers and edge clamping: source = (dst + 0.5)·(H/oh) − 0.5.
pub fn resize_bilinear2d<'t, T: Real>(x: &Var<'t, T>, size: (usize, usize)) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(invalid("bilinear", format!("expected [N, C, H, W], got {s:?}")));
    }
    let (oh, ow) = size;
    if oh == 0 || ow == 0 || s[2] == 0 || s[3] == 0 {
        return Err(invalid("bilinear", format!("zero extent in {s:?} -> {size:?}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    if (oh, ow) == (h, w) {
        return Ok(x.clone());
    }
    let out = resize_bilinear(x.value().data(), planes, h, w, oh, ow);
    let in_shape = s.to_vec();
    let value = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
    Var::record("bilinear", &[x], value, move |g, _| {
        let dx = resize_bilinear_backward(g.data(), planes, h, w, oh, ow);
        vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
    })
}

/// [`resize_bilinear2d`] restricted to enlarging (or keeping) both extents.
pub fn upsample_bilinear<'t, T: Real>(x: &Var<'t, T>, size: (usize, usize)) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() == 4 && (size.0 < s[2] || size.1 < s[3]) {
        return Err(invalid("upsample", format!("target {size:?} smaller than input {s:?}")));
    }
    resize_bilinear2d(x, size)
}
