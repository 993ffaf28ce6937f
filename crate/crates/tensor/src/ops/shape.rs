use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::{numel, strides, Real, Tensor};

fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(TensorError::InvalidPermutation(perm.to_vec()));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(TensorError::InvalidPermutation(perm.to_vec()));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Inverse of a permutation.
pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Materializes `x` with its axes reordered: output axis `i` is input axis `perm[i]`.
pub fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    check_perm(perm, x.rank())?;
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.numel();
    let mut out = Vec::with_capacity(total);
    let src = x.data();
    let rank = out_shape.len();
    if rank == 0 || total == 0 {
        return Ok(Tensor::from_parts(out_shape, src.to_vec()));
    }
    // Walk the output in row-major order, tracking the source offset with an odometer.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..inner {
            out.push(src[off]);
            off += inner_stride;
        }
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return Ok(Tensor::from_parts(out_shape, out));
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

impl<'t, T: Real> Var<'t, T> {
    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let out = self.value().reshaped(shape)?;
        let orig = self.shape().to_vec();
        Var::record("reshape", &[self], out, move |g, _| {
            vec![Some(g.reshaped(&orig).expect("same element count"))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let out = permute_tensor(self.value(), perm)?;
        let inv = inverse_permutation(perm);
        Var::record("permute", &[self], out, move |g, _| {
            vec![Some(permute_tensor(g, &inv).expect("valid permutation"))]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Self> {
        let r = self.value().rank();
        if r < 2 {
            return Err(TensorError::InvalidAxis { op: "transpose", axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var<'t, T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| crate::error::invalid("concat", "no parts"))?;
        let rank = first.value().rank();
        check_axis("concat", axis, rank)?;
        for p in parts {
            let s = p.shape();
            let agrees = s.len() == rank && s.iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.value().data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Var::record("concat", parts, value, move |g, needs| {
            let mut grads: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (dst, &s) in grads.iter_mut().zip(&sizes) {
                    dst.extend_from_slice(&gd[off..off + s * inner]);
                    off += s * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .zip(needs)
                .map(|((d, s), &need)| need.then(|| Tensor::from_parts(s.clone(), d)))
                .collect()
        })
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, sizes: &[usize], axis: usize) -> Result<Vec<Self>> {
        let shape = self.shape().to_vec();
        check_axis("split", axis, shape.len())?;
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(TensorError::SplitSizes {
                sizes: sizes.to_vec(),
                extent: shape[axis],
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// The sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape().to_vec();
        check_axis("narrow", axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(crate::error::invalid(
                "narrow",
                format!("range {start}..{} exceeds extent {}", start + len, shape[axis]),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let ext = shape[axis];
        let src = self.value().data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let value = Tensor::from_parts(oshape, data);
        Var::record("narrow", &[self], value, move |g, _| {
            let mut dx = vec![T::zero(); numel(&shape)];
            let gd = g.data();
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        })
    }
}
