use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::{numel, strides, Real, Tensor};

/// Reduction selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

/// For each input element, the flat index of the output cell it reduces into.
fn output_map(shape: &[usize], reduced: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let out_strides = strides(&out_shape);
    let mut per_axis = Vec::with_capacity(shape.len());
    let mut k = 0;
    for &r in reduced {
        if r {
            per_axis.push(0);
        } else {
            per_axis.push(out_strides[k]);
            k += 1;
        }
    }
    let in_strides = strides(shape);
    let map = (0..numel(shape))
        .map(|i| {
            let mut o = 0;
            for ax in 0..shape.len() {
                o += (i / in_strides[ax]) % shape[ax] * per_axis[ax];
            }
            o
        })
        .collect();
    (out_shape, map)
}

impl<'t, T: Real> Var<'t, T> {
    /// Sums or averages over `axes`, removing them from the shape.
    ///
    /// Every output cell accumulates its inputs in ascending flat-index order.
    pub fn reduce(&self, kind: Reduce, axes: &[usize]) -> Result<Self> {
        let shape = self.shape().to_vec();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(TensorError::InvalidAxis {
                    op: "reduce",
                    axis: a,
                    rank: shape.len(),
                });
            }
            reduced[a] = true;
        }
        let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&d, _)| d).product();
        if count == 0 {
            return Err(TensorError::EmptyReduction("reduce"));
        }
        let (out_shape, map) = output_map(&shape, &reduced);
        let mut out = vec![T::zero(); numel(&out_shape)];
        for (&o, &v) in map.iter().zip(self.value().data()) {
            out[o] = out[o] + v;
        }
        let factor = match kind {
            Reduce::Sum => T::one(),
            Reduce::Mean => T::one() / T::lit(count as f64),
        };
        if kind == Reduce::Mean {
            for o in &mut out {
                *o = *o * factor;
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        Var::record("reduce", &[self], value, move |g, _| {
            let gd = g.data();
            let dx = map.iter().map(|&o| gd[o] * factor).collect();
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        })
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Self> {
        self.reduce(Reduce::Sum, axes)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Self> {
        self.reduce(Reduce::Mean, axes)
    }

    /// Sum of every element as a rank-0 scalar.
    pub fn sum_all(&self) -> Result<Self> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(Reduce::Sum, &axes)
    }

    /// Mean of every element as a rank-0 scalar.
    pub fn mean_all(&self) -> Result<Self> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(Reduce::Mean, &axes)
    }
}
