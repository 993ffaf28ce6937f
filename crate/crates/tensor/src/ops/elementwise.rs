use crate::error::{Result, TensorError};
use crate::profile::{self, MacKind};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Elementwise primitive selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
}

/// Number of times `b` repeats inside `a` when `b` (after dropping leading
/// unit extents) is a trailing suffix of `a`'s shape.
fn broadcast_repeats(a: &[usize], b: &[usize]) -> Option<usize> {
    if a == b {
        return Some(1);
    }
    let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    let core = &b[first..];
    if core.len() > a.len() || a[a.len() - core.len()..] != *core {
        return None;
    }
    let inner: usize = core.iter().product();
    Some(a.iter().product::<usize>() / inner.max(1))
}

/// Sums a broadcast gradient back down to `b`'s shape.
fn reduce_broadcast<T: Real>(g: &Tensor<T>, b_shape: &[usize], repeats: usize) -> Tensor<T> {
    if repeats == 1 {
        return g.reshaped(b_shape).expect("same element count");
    }
    let inner = g.numel() / repeats;
    let mut out = vec![T::zero(); inner];
    for chunk in g.data().chunks(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    Tensor::from_parts(b_shape.to_vec(), out)
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, usize)> {
    let repeats = broadcast_repeats(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let bd = b.data();
    let inner = bd.len();
    let mut out = Vec::with_capacity(a.numel());
    for chunk in a.data().chunks(inner.max(1)) {
        out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
    }
    Ok((Tensor::from_parts(a.shape().to_vec(), out), repeats))
}

impl<'t, T: Real> Var<'t, T> {
    /// Dispatches on [`Elementwise`]; `other` is required for binary kinds.
    pub fn elementwise(&self, kind: Elementwise, other: Option<&Var<'t, T>>) -> Result<Self> {
        let need_other = || TensorError::InvalidArgument {
            op: "elementwise",
            msg: format!("{kind:?} needs a second operand"),
        };
        match kind {
            Elementwise::Add => self.add(other.ok_or_else(need_other)?),
            Elementwise::Sub => self.sub(other.ok_or_else(need_other)?),
            Elementwise::Mul => self.mul(other.ok_or_else(need_other)?),
            Elementwise::Relu => self.relu(),
            Elementwise::Sigmoid => self.sigmoid(),
        }
    }

    /// `self + other`; `other` may broadcast over leading extents.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Self> {
        let (out, repeats) = binary(self.value(), other.value(), "add", |x, y| x + y)?;
        let b_shape = other.shape().to_vec();
        Var::record("add", &[self, other], out, move |g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| reduce_broadcast(g, &b_shape, repeats)),
            ]
        })
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Self> {
        let (out, repeats) = binary(self.value(), other.value(), "sub", |x, y| x - y)?;
        let b_shape = other.shape().to_vec();
        Var::record("sub", &[self, other], out, move |g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| reduce_broadcast(&g.map(|v| -v), &b_shape, repeats)),
            ]
        })
    }

    /// `self * other`; `other` may broadcast over leading extents.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Self> {
        let (out, repeats) = binary(self.value(), other.value(), "mul", |x, y| x * y)?;
        let a = self.value().clone();
        let b = other.value().clone();
        Var::record("mul", &[self, other], out, move |g, needs| {
            let da = needs[0].then(|| binary(g, &b, "mul", |x, y| x * y).expect("forward shapes").0);
            let db = needs[1].then(|| {
                let prod = g.zip_map(&a, |x, y| x * y).expect("same shape");
                reduce_broadcast(&prod, b.shape(), repeats)
            });
            vec![da, db]
        })
    }

    pub fn relu(&self) -> Result<Self> {
        profile::record(MacKind::Elementwise, self.value().numel() as u64);
        let x = self.value().clone();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        Var::record("relu", &[self], out, move |g, _| {
            vec![Some(
                g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                    .expect("same shape"),
            )]
        })
    }

    pub fn sigmoid(&self) -> Result<Self> {
        profile::record(MacKind::Elementwise, self.value().numel() as u64);
        let out = self.value().map(sigmoid);
        let y = out.clone();
        Var::record("sigmoid", &[self], out, move |g, _| {
            vec![Some(
                g.zip_map(&y, |gv, yv| gv * yv * (T::one() - yv)).expect("same shape"),
            )]
        })
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Result<Self> {
        let c = T::lit(c);
        let out = self.value().map(|v| v * c);
        Var::record("scale", &[self], out, move |g, _| vec![Some(g.map(|v| v * c))])
    }
}

/// Numerically stable logistic function, kept strictly inside (0, 1).
pub fn sigmoid<T: Real>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    y.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::lit(2.0))
}
