use crate::error::{Result, TensorError};
use crate::profile::MacKind;
use crate::tape::Var;
use crate::tensor::Real;

/// `x · W + b` over the trailing axis; `weight` is `[Cin, Cout]`.
pub fn linear<'t, T: Real>(x: &Var<'t, T>, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let cin = ws[0];
    let cout = ws[1];
    let rows = x.value().numel() / cin.max(1);
    let mut out_shape = xs.to_vec();
    *out_shape.last_mut().expect("non-empty") = cout;
    let flat = x.reshape(&[rows, cin])?;
    let mut y = flat.matmul_counted(weight, MacKind::Linear)?;
    if let Some(b) = bias {
        y = y.add(b)?;
    }
    y.reshape(&out_shape)
}
