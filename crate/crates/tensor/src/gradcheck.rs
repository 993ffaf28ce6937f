//! Finite-difference verification of analytic gradients (64-bit).

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients
    /// near zero are compared in absolute terms.
    pub floor: f64,
    /// Probe at most this many coordinates per input (evenly spaced).
    pub max_probes: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_probes: None,
        }
    }
}

impl GradCheckConfig {
    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn max_probes(mut self, n: usize) -> Self {
        self.max_probes = Some(n);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let vars: Vec<Var<'_, f64>> = inputs.iter().cloned().map(Var::constant).collect();
    f(&vars)?.value().item()
}

/// Compares the tape gradient of a scalar function of several inputs with
/// central finite differences.
///
/// `f` is evaluated twice at the base point first; differing results are
/// reported as [`TensorError::NonDeterministic`].
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let base = eval(&f, inputs)?;
    if eval(&f, inputs)?.to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().cloned().map(|t| tape.leaf(t)).collect();
    let y = f(&vars)?;
    tape.backward(&y)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
        tol: cfg.tol,
    };
    let mut shifted = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let grad = tape.grad(v).unwrap_or_else(|| Tensor::zeros(v.shape()));
        for i in probe_indices(inputs[k].numel(), cfg.max_probes) {
            let x0 = inputs[k].data()[i];
            shifted[k].data_mut()[i] = x0 + cfg.h;
            let fp = eval(&f, &shifted)?;
            shifted[k].data_mut()[i] = x0 - cfg.h;
            let fm = eval(&f, &shifted)?;
            shifted[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let analytic = grad.data()[i];
            let err = relative_error(analytic, numeric, cfg.floor);
            report.probes += 1;
            if err > report.max_rel_err || report.probes == 1 {
                report.max_rel_err = err;
                report.worst = (k, i);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_many(move |v: &[Var<'_, f64>]| f(&v[0]), std::slice::from_ref(x), cfg)
}
