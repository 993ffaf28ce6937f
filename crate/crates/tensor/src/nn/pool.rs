use crate::error::{invalid, Result};
use crate::kernels::pool_bin;
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Adaptive average pooling of `[N, C, H, W]` to `[N, C, m, m]`.
///
/// Output bin `i` averages input rows `[floor(i·H/m), ceil((i+1)·H/m))`,
/// and likewise for columns.
pub fn adaptive_avg_pool2d<'t, T: Real>(x: &Var<'t, T>, m: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(invalid("adaptive_avg_pool2d", format!("expected [N, C, H, W], got {s:?}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    if m == 0 || m > h.min(w) {
        return Err(invalid("adaptive_avg_pool2d", format!("pool size {m} outside 1..={}", h.min(w))));
    }
    let rows: Vec<_> = (0..m).map(|i| pool_bin(i, m, h)).collect();
    let cols: Vec<_> = (0..m).map(|j| pool_bin(j, m, w)).collect();
    let xd = x.value().data();
    let mut out = Vec::with_capacity(planes * m * m);
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut acc = T::zero();
                for r in r0..r1 {
                    for &v in &src[r * w + c0..r * w + c1] {
                        acc = acc + v;
                    }
                }
                out.push(acc / T::lit(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    let in_shape = s.to_vec();
    let value = Tensor::from_parts(vec![s[0], s[1], m, m], out);
    Var::record("adaptive_avg_pool2d", &[x], value, move |g, _| {
        let gd = g.data();
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for (i, &(r0, r1)) in rows.iter().enumerate() {
                for (j, &(c0, c1)) in cols.iter().enumerate() {
                    let v = gd[(p * m + i) * m + j] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                    for r in r0..r1 {
                        for d in &mut dst[r * w + c0..r * w + c1] {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
    })
}
