use crate::error::{Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::profile::{self, MacKind};
use crate::tape::Var;
use crate::tensor::{numel, Real, Tensor};

/// Resolved batch layout of a (possibly batched) matrix product.
struct Layout {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is a single `[k, n]` matrix shared by every batch entry.
    shared_b: bool,
    out_shape: Vec<usize>,
}

fn layout(a: &[usize], b: &[usize]) -> Result<Layout> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(mismatch());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_b = b_batch.iter().all(|&d| d == 1);
    if !shared_b && a_batch != b_batch {
        return Err(mismatch());
    }
    let mut out_shape = a_batch.to_vec();
    out_shape.extend([m, n]);
    Ok(Layout {
        batch: numel(a_batch),
        m,
        k,
        n,
        shared_b,
        out_shape,
    })
}

impl<'t, T: Real> Var<'t, T> {
    /// Matrix product `[.., M, K] · [.., K, N]`.
    ///
    /// Leading batch extents must agree, or `other` must be a plain `[K, N]`
    /// matrix which is then shared across the batch.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Self> {
        self.matmul_counted(other, MacKind::Matmul)
    }

    /// [`Var::matmul`] with its MACs attributed to `kind`.
    pub(crate) fn matmul_counted(&self, other: &Var<'t, T>, kind: MacKind) -> Result<Self> {
        let l = layout(self.shape(), other.shape())?;
        profile::record(kind, (l.batch * l.m * l.k * l.n) as u64);
        let a = self.value().clone();
        let b = other.value().clone();
        let out = matmul_forward(&a, &b, &l);
        Var::record("matmul", &[self, other], out, move |g, needs| {
            let (bt, m, k, n) = (l.batch, l.m, l.k, l.n);
            let gd = g.data();
            let da = needs[0].then(|| {
                let mut da = vec![T::zero(); bt * m * k];
                for i in 0..bt {
                    let bs = if l.shared_b { &b.data()[..k * n] } else { &b.data()[i * k * n..(i + 1) * k * n] };
                    gemm_nt(m, n, k, &gd[i * m * n..(i + 1) * m * n], bs, &mut da[i * m * k..(i + 1) * m * k]);
                }
                Tensor::from_parts(a.shape().to_vec(), da)
            });
            let db = needs[1].then(|| {
                let mut db = vec![T::zero(); b.numel()];
                for i in 0..bt {
                    let dst = if l.shared_b { &mut db[..] } else { &mut db[i * k * n..(i + 1) * k * n] };
                    gemm_tn(k, m, n, &a.data()[i * m * k..(i + 1) * m * k], &gd[i * m * n..(i + 1) * m * n], dst);
                }
                Tensor::from_parts(b.shape().to_vec(), db)
            });
            vec![da, db]
        })
    }
}

fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, l: &Layout) -> Tensor<T> {
    let (m, k, n) = (l.m, l.k, l.n);
    let mut out = vec![T::zero(); l.batch * m * n];
    for i in 0..l.batch {
        let bs = if l.shared_b { &b.data()[..k * n] } else { &b.data()[i * k * n..(i + 1) * k * n] };
        gemm_nn(m, k, n, &a.data()[i * m * k..(i + 1) * m * k], bs, &mut out[i * m * n..(i + 1) * m * n]);
    }
    Tensor::from_parts(l.out_shape.clone(), out)
}
