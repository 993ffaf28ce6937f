use crate::error::{invalid, Result, TensorError};
use crate::profile::{self, MacKind};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Per-channel statistics observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Number of values per channel (`N·H·W`).
    pub count: usize,
}

impl<T: Real> BatchStats<T> {
    /// Applies an exponential running-average update:
    /// `r ← (1 − momentum)·r + momentum·batch`, with the batch variance
    /// bias-corrected by `count / (count − 1)`.
    pub fn update_running(&self, running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        let corr = T::lit(self.count as f64 / (self.count as f64 - 1.0).max(1.0));
        for (r, &b) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = (keep * *r + m * b * corr).max(T::zero());
        }
    }
}

fn check_channels(op: &'static str, x: &[usize], c: usize, p: &[usize]) -> Result<()> {
    if p != [c] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.to_vec(),
            rhs: p.to_vec(),
        });
    }
    Ok(())
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    if s.len() != 4 {
        return Err(invalid(op, format!("expected [N, C, H, W], got {s:?}")));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

/// Train-mode batch norm over `[N, C, H, W]` using batch statistics.
pub fn batch_norm2d_train<'t, T: Real>(
    x: &Var<'t, T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
    eps: f64,
) -> Result<(Var<'t, T>, BatchStats<T>)> {
    let (n, c, hw) = dims4("batch_norm2d", x.shape())?;
    check_channels("batch_norm2d", x.shape(), c, gamma.shape())?;
    check_channels("batch_norm2d", x.shape(), c, beta.shape())?;
    let count = n * hw;
    if count < 2 {
        return Err(invalid("batch_norm2d", "train mode needs at least two values per channel"));
    }
    profile::record(MacKind::Elementwise, x.value().numel() as u64);
    let xd = x.value().data();
    let cnt = T::lit(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                s = s + v;
            }
        }
        let mu = s / cnt;
        let mut q = T::zero();
        for b in 0..n {
            for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                q = q + (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = q / cnt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
    let gd = gamma.value().data();
    let bd = beta.value().data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in r {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gd[ch] * h + bd[ch];
            }
        }
    }
    let shape = x.shape().to_vec();
    let value = Tensor::from_parts(shape.clone(), out);
    let gamma_v = gamma.value().clone();
    let y = Var::record("batch_norm2d", &[x, gamma, beta], value, move |g, needs| {
        let gdat = g.data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    sum_dy[ch] = sum_dy[ch] + gdat[i];
                    sum_dy_xhat[ch] = sum_dy_xhat[ch] + gdat[i] * xhat[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let gm = gamma_v.data();
            let mut dx = vec![T::zero(); gdat.len()];
            for b in 0..n {
                for ch in 0..c {
                    let k = gm[ch] * inv_std[ch] / cnt;
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        dx[i] = k * (cnt * gdat[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                    }
                }
            }
            Tensor::from_parts(shape.clone(), dx)
        });
        vec![
            dx,
            needs[1].then(|| Tensor::from_parts(vec![c], sum_dy_xhat.clone())),
            needs[2].then(|| Tensor::from_parts(vec![c], sum_dy.clone())),
        ]
    })?;
    Ok((y, BatchStats { mean, var, count }))
}

/// Eval-mode batch norm using running statistics.
pub fn batch_norm2d_eval<'t, T: Real>(
    x: &Var<'t, T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let (n, c, hw) = dims4("batch_norm2d", x.shape())?;
    for p in [gamma.shape(), beta.shape(), running_mean.shape(), running_var.shape()] {
        check_channels("batch_norm2d", x.shape(), c, p)?;
    }
    profile::record(MacKind::Elementwise, x.value().numel() as u64);
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
        .collect();
    let rm = running_mean.data().to_vec();
    let xd = x.value().data();
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                out[i] = gd[ch] * (xd[i] - rm[ch]) * inv_std[ch] + bd[ch];
            }
        }
    }
    let shape = x.shape().to_vec();
    let xv = x.value().clone();
    let gamma_v = gamma.value().clone();
    let value = Tensor::from_parts(shape.clone(), out);
    Var::record("batch_norm2d_eval", &[x, gamma, beta], value, move |g, needs| {
        let gdat = g.data();
        let xd = xv.data();
        let gm = gamma_v.data();
        let mut dx = needs[0].then(|| vec![T::zero(); gdat.len()]);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    let h = (xd[i] - rm[ch]) * inv_std[ch];
                    dgamma[ch] = dgamma[ch] + gdat[i] * h;
                    dbeta[ch] = dbeta[ch] + gdat[i];
                    if let Some(dx) = dx.as_mut() {
                        dx[i] = gdat[i] * gm[ch] * inv_std[ch];
                    }
                }
            }
        }
        vec![
            dx.map(|d| Tensor::from_parts(shape.clone(), d)),
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ]
    })
}

/// Layer norm over the trailing axis of `x: [..., C]`.
pub fn layer_norm<'t, T: Real>(x: &Var<'t, T>, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    let c = *x.shape().last().ok_or_else(|| invalid("layer_norm", "rank-0 input"))?;
    check_channels("layer_norm", x.shape(), c, gamma.shape())?;
    check_channels("layer_norm", x.shape(), c, beta.shape())?;
    if c == 0 {
        return Err(TensorError::EmptyReduction("layer_norm"));
    }
    profile::record(MacKind::Elementwise, x.value().numel() as u64);
    let cnt = T::lit(c as f64);
    let xd = x.value().data();
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let tokens = xd.len() / c;
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); tokens];
    let mut out = vec![T::zero(); xd.len()];
    for t in 0..tokens {
        let row = &xd[t * c..(t + 1) * c];
        let mu = row.iter().fold(T::zero(), |a, &v| a + v) / cnt;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / cnt;
        let is = T::one() / (var + T::lit(eps)).sqrt();
        inv_std[t] = is;
        for j in 0..c {
            let h = (row[j] - mu) * is;
            xhat[t * c + j] = h;
            out[t * c + j] = gd[j] * h + bd[j];
        }
    }
    let shape = x.shape().to_vec();
    let gamma_v = gamma.value().clone();
    let value = Tensor::from_parts(shape.clone(), out);
    Var::record("layer_norm", &[x, gamma, beta], value, move |g, needs| {
        let gdat = g.data();
        let gm = gamma_v.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = needs[0].then(|| vec![T::zero(); gdat.len()]);
        for t in 0..tokens {
            let gr = &gdat[t * c..(t + 1) * c];
            let hr = &xhat[t * c..(t + 1) * c];
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..c {
                dgamma[j] = dgamma[j] + gr[j] * hr[j];
                dbeta[j] = dbeta[j] + gr[j];
                let gh = gr[j] * gm[j];
                s1 = s1 + gh;
                s2 = s2 + gh * hr[j];
            }
            if let Some(dx) = dx.as_mut() {
                let k = inv_std[t] / cnt;
                for j in 0..c {
                    dx[t * c + j] = k * (cnt * gr[j] * gm[j] - s1 - hr[j] * s2);
                }
            }
        }
        vec![
            dx.map(|d| Tensor::from_parts(shape.clone(), d)),
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ]
    })
}
