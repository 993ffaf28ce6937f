use crate::error::{Result, TensorError};
use crate::profile::{self, MacKind};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

impl<'t, T: Real> Var<'t, T> {
    /// Softmax over the last axis, with max subtraction.
    ///
    /// Outputs are clamped into the open interval (0, 1) when the row has more
    /// than one entry, so saturated rows never produce exact zeros or ones.
    pub fn softmax(&self) -> Result<Self> {
        let x = self.value();
        let l = *x.shape().last().ok_or(TensorError::EmptyReduction("softmax"))?;
        if l == 0 {
            return Err(TensorError::EmptyReduction("softmax"));
        }
        if !x.is_finite() {
            return Err(TensorError::NonFinite("softmax"));
        }
        profile::record(MacKind::Elementwise, x.numel() as u64);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(l) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut sum = T::zero();
            for &v in row {
                let e = (v - m).exp();
                sum = sum + e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o = *o / sum;
                if l > 1 {
                    *o = o.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::lit(2.0));
                }
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), out);
        let yc = y.clone();
        Var::record("softmax", &[self], y, move |g, _| {
            let mut dx = Vec::with_capacity(g.numel());
            for (gr, yr) in g.data().chunks(l).zip(yc.data().chunks(l)) {
                let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        })
    }
}
