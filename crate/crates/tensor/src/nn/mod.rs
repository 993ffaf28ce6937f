//! Neural-network primitives built on the differentiable ops.

mod conv;
mod linear;
mod norm;
mod pool;
mod resize;

pub use conv::{conv2d, Conv2dOptions};
pub use linear::linear;
pub use norm::{batch_norm2d_eval, batch_norm2d_train, layer_norm, BatchStats};
pub use pool::adaptive_avg_pool2d;
pub use resize::{resize_bilinear2d, upsample_bilinear};

use crate::error::{invalid, Result};
use crate::tape::Var;
use crate::tensor::Real;

/// `[N, C, H, W]` → `[N, H·W, C]`; token `(h, w)` lands at index `h·W + w`.
pub fn to_tokens<'t, T: Real>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(invalid("to_tokens", format!("expected [N, C, H, W], got {s:?}")));
    }
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// Inverse of [`to_tokens`] for a `h × w` grid.
pub fn from_tokens<'t, T: Real>(x: &Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(invalid("from_tokens", format!("{s:?} is not a {h}x{w} token grid")));
    }
    x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])
}
