//! Raw numeric kernels over flat slices.
//!
//! Every accumulation runs in ascending index order, so results are
//! bit-reproducible for a given input.

use crate::tensor::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, out);
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && out.len() >= m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    }
}

/// Transposes a row-major `rows×cols` matrix.
pub fn transpose<T: Real>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-D convolution on a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub dh: usize,
    pub dw: usize,
}

impl ConvGeom {
    /// Output extent, or `None` when degenerate.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
        let span = dil * (kernel - 1) + 1;
        let padded = input + 2 * pad;
        if padded < span || stride == 0 {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Range of output columns `ox` whose input column `ox*sw - pw + off` is in bounds.
    fn valid_cols(&self, off: usize) -> (usize, usize) {
        valid_range(self.out_w, self.in_w, self.sw, self.pw, off)
    }

    fn valid_rows(&self, off: usize) -> (usize, usize) {
        valid_range(self.out_h, self.in_h, self.sh, self.ph, off)
    }
}

/// Output indices `o` with `0 <= o*stride + off - pad < input`.
fn valid_range(out: usize, input: usize, stride: usize, pad: usize, off: usize) -> (usize, usize) {
    // o*stride + off >= pad
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    // o*stride + off - pad <= input - 1
    let hi = if input + pad < off + 1 {
        0
    } else {
        ((input + pad - off - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Unfolds one image `[c, in_h, in_w]` into `[c*kh*kw, out_h*out_w]`.
pub fn im2col<T: Real>(x: &[T], c: usize, g: &ConvGeom, col: &mut [T]) {
    let p = g.out_h * g.out_w;
    col.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..c {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            let (oy0, oy1) = g.valid_rows(ki * g.dh);
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let (ox0, ox1) = g.valid_cols(kj * g.dw);
                for oy in oy0..oy1 {
                    let iy = oy * g.sh + ki * g.dh - g.ph;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.sw == 1 {
                        let start = ox0 + kj * g.dw - g.pw;
                        drow[ox0..ox1].copy_from_slice(&src[start..start + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] = src[ox * g.sw + kj * g.dw - g.pw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
pub fn col2im<T: Real>(col: &[T], c: usize, g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_h * g.out_w;
    for ci in 0..c {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            let (oy0, oy1) = g.valid_rows(ki * g.dh);
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let (ox0, ox1) = g.valid_cols(kj * g.dw);
                for oy in oy0..oy1 {
                    let iy = oy * g.sh + ki * g.dh - g.ph;
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let drow = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for ox in ox0..ox1 {
                        let ix = ox * g.sw + kj * g.dw - g.pw;
                        drow[ix] = drow[ix] + srow[ox];
                    }
                }
            }
        }
    }
}

/// Grouped convolution forward for a batch.
///
/// `x`: `[n, cin, in_h, in_w]`, `w`: `[cout, cin/groups, kh, kw]`,
/// returns `[n, cout, out_h, out_w]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    x: &[T],
    n: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
    groups: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let p = g.out_h * g.out_w;
    let hw = g.in_h * g.in_w;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let k2 = cin_g * g.kh * g.kw;
    let mut out = vec![T::zero(); n * cout * p];
    if cin_g == 1 && cout_g == 1 {
        depthwise_forward(x, n, cin, w, g, &mut out);
    } else {
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k2 * p] };
        for b in 0..n {
            for gi in 0..groups {
                let xs = &x[(b * cin + gi * cin_g) * hw..(b * cin + (gi + 1) * cin_g) * hw];
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, cin_g, g, &mut col);
                    &col
                };
                let ws = &w[gi * cout_g * k2..(gi + 1) * cout_g * k2];
                let os = &mut out[(b * cout + gi * cout_g) * p..(b * cout + (gi + 1) * cout_g) * p];
                gemm_nn(cout_g, k2, p, ws, cols, os);
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..n {
            for (co, &bv) in bias.iter().enumerate() {
                for o in &mut out[(b * cout + co) * p..(b * cout + co + 1) * p] {
                    *o = *o + bv;
                }
            }
        }
    }
    out
}

fn depthwise_forward<T: Real>(x: &[T], n: usize, c: usize, w: &[T], g: &ConvGeom, out: &mut [T]) {
    let p = g.out_h * g.out_w;
    let hw = g.in_h * g.in_w;
    let kk = g.kh * g.kw;
    for b in 0..n {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let o = &mut out[(b * c + ch) * p..(b * c + ch + 1) * p];
            let wk = &w[ch * kk..(ch + 1) * kk];
            for ki in 0..g.kh {
                let (oy0, oy1) = g.valid_rows(ki * g.dh);
                for kj in 0..g.kw {
                    let wv = wk[ki * g.kw + kj];
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_cols(kj * g.dw);
                    for oy in oy0..oy1 {
                        let iy = oy * g.sh + ki * g.dh - g.ph;
                        let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let orow = &mut o[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.sw == 1 {
                            let start = ox0 + kj * g.dw - g.pw;
                            for (ov, &sv) in orow[ox0..ox1].iter_mut().zip(&src[start..]) {
                                *ov = *ov + wv * sv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] = orow[ox] + wv * src[ox * g.sw + kj * g.dw - g.pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]: `(dx, dw, dbias)`, each computed only when requested.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    groups: usize,
    g: &ConvGeom,
    dy: &[T],
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.out_h * g.out_w;
    let hw = g.in_h * g.in_w;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let k2 = cin_g * g.kh * g.kw;
    let mut dx = need.0.then(|| vec![T::zero(); n * cin * hw]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); cout];
        for b in 0..n {
            for (co, acc) in db.iter_mut().enumerate() {
                for &v in &dy[(b * cout + co) * p..(b * cout + co + 1) * p] {
                    *acc = *acc + v;
                }
            }
        }
        db
    });
    if cin_g == 1 && cout_g == 1 {
        depthwise_backward(x, n, cin, w, g, dy, dx.as_deref_mut(), dw.as_deref_mut());
        return (dx, dw, db);
    }
    let pointwise = g.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { k2 * p }];
    let mut dcol = vec![T::zero(); if pointwise { 0 } else { k2 * p }];
    for b in 0..n {
        for gi in 0..groups {
            let xs = &x[(b * cin + gi * cin_g) * hw..(b * cin + (gi + 1) * cin_g) * hw];
            let dys = &dy[(b * cout + gi * cout_g) * p..(b * cout + (gi + 1) * cout_g) * p];
            let ws = &w[gi * cout_g * k2..(gi + 1) * cout_g * k2];
            if let Some(dw) = dw.as_deref_mut() {
                let cols: &[T] = if pointwise {
                    xs
                } else {
                    im2col(xs, cin_g, g, &mut col);
                    &col
                };
                gemm_nt(cout_g, p, k2, dys, cols, &mut dw[gi * cout_g * k2..(gi + 1) * cout_g * k2]);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxs = &mut dx[(b * cin + gi * cin_g) * hw..(b * cin + (gi + 1) * cin_g) * hw];
                if pointwise {
                    gemm_tn(k2, cout_g, p, ws, dys, dxs);
                } else {
                    dcol.iter_mut().for_each(|v| *v = T::zero());
                    gemm_tn(k2, cout_g, p, ws, dys, &mut dcol);
                    col2im(&dcol, cin_g, g, dxs);
                }
            }
        }
    }
    (dx, dw, db)
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    w: &[T],
    g: &ConvGeom,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let p = g.out_h * g.out_w;
    let hw = g.in_h * g.in_w;
    let kk = g.kh * g.kw;
    for b in 0..n {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let go = &dy[(b * c + ch) * p..(b * c + ch + 1) * p];
            for ki in 0..g.kh {
                let (oy0, oy1) = g.valid_rows(ki * g.dh);
                for kj in 0..g.kw {
                    let (ox0, ox1) = g.valid_cols(kj * g.dw);
                    let widx = ch * kk + ki * g.kw + kj;
                    let wv = w[widx];
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.sh + ki * g.dh - g.ph;
                        let grow = &go[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox0..ox1 {
                            let ix = ox * g.sw + kj * g.dw - g.pw;
                            acc = acc + grow[ox] * plane[iy * g.in_w + ix];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[(b * c + ch) * hw + iy * g.in_w..(b * c + ch) * hw + (iy + 1) * g.in_w];
                            for ox in ox0..ox1 {
                                let ix = ox * g.sw + kj * g.dw - g.pw;
                                drow[ix] = drow[ix] + wv * grow[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] = dw[widx] + acc;
                    }
                }
            }
        }
    }
}

/// Adaptive average pooling bin `[start, end)` for output index `i` of `m` over `len`.
pub fn pool_bin(i: usize, m: usize, len: usize) -> (usize, usize) {
    let start = (i * len) / m;
    let end = ((i + 1) * len).div_ceil(m);
    (start, end)
}

/// Interpolation taps `(i0, i1, w0, w1)` for half-pixel-center bilinear resampling
/// of an axis of length `src` to length `dst`.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let l = s - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

/// Bilinear resampling of `planes` stacked `[planes, h, w]` planes to `[planes, oh, ow]`.
///
/// Works in both directions; no anti-aliasing is applied when shrinking.
pub fn resize_bilinear<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx: Vec<_> = bilinear_taps(w, ow)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb)))
        .collect();
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let top = r0[x0] * wx0 + r0[x1] * wx1;
                let bot = r1[x0] * wx0 + r1[x1] * wx1;
                drow[ox] = top * wy0 + bot * wy1;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx: Vec<_> = bilinear_taps(w, ow)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb)))
        .collect();
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let g = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        let d = &mut dx[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * wy0;
                let bot = v * wy1;
                d[y0 * w + x0] = d[y0 * w + x0] + top * wx0;
                d[y0 * w + x1] = d[y0 * w + x1] + top * wx1;
                d[y1 * w + x0] = d[y1 * w + x0] + bot * wx0;
                d[y1 * w + x1] = d[y1 * w + x1] + bot * wx1;
            }
        }
    }
    dx
}
