//! BCE + Dice per output and the deeply supervised overall loss.

use std::fmt;
use std::str::FromStr;

use gapnet_tensor::{Real, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::labels::{RegionTargets, Target};
use crate::model::ModelOutputs;

pub const BCE_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

fn check_pair<T: Real>(p: &Var<'_, T>, g: &Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() || p.shape().is_empty() {
        return Err(invalid(format!(
            "prediction {:?} and target {:?} differ",
            p.shape(),
            g.shape()
        )));
    }
    Ok(())
}

/// Pixel-mean binary cross-entropy with probabilities clamped to `[ε, 1−ε]`.
pub fn bce<'t, T: Real>(p: &Var<'t, T>, g: &Tensor<T>) -> Result<Var<'t, T>> {
    check_pair(p, g)?;
    let (lo, hi) = (T::lit(BCE_EPS), T::lit(1.0 - BCE_EPS));
    let n = T::lit(p.value().numel() as f64);
    let total: T = p
        .value()
        .data()
        .iter()
        .zip(g.data())
        .map(|(&pv, &gv)| {
            let pc = pv.max(lo).min(hi);
            -(gv * pc.ln() + (T::one() - gv) * (T::one() - pc).ln())
        })
        .fold(T::zero(), |a, b| a + b);
    let (pt, gt) = (p.value().clone(), g.clone());
    Ok(Var::record("bce", &[p], Tensor::scalar(total / n), move |up, _| {
        let u = up.data()[0] / n;
        let grad = pt
            .zip_map(&gt, |pv, gv| {
                if pv < lo || pv > hi {
                    T::zero()
                } else {
                    u * (-gv / pv + (T::one() - gv) / (T::one() - pv))
                }
            })
            .expect("same shape");
        vec![Some(grad)]
    })?)
}

/// `1 − (2Σgp + s)/(Σg + Σp + s)` per sample (leading axis), averaged over
/// the batch.
pub fn dice<'t, T: Real>(p: &Var<'t, T>, g: &Tensor<T>) -> Result<Var<'t, T>> {
    check_pair(p, g)?;
    let s = T::lit(DICE_SMOOTH);
    let n = p.shape()[0];
    let per = p.value().numel() / n.max(1);
    let sums: Vec<(T, T, T)> = (0..n)
        .map(|b| {
            let pd = &p.value().data()[b * per..(b + 1) * per];
            let gd = &g.data()[b * per..(b + 1) * per];
            pd.iter().zip(gd).fold((T::zero(), T::zero(), T::zero()), |(i, sp, sg), (&pv, &gv)| {
                (i + pv * gv, sp + pv, sg + gv)
            })
        })
        .collect();
    let nb = T::lit(n as f64);
    let loss = sums
        .iter()
        .map(|&(i, sp, sg)| T::one() - (T::lit(2.0) * i + s) / (sg + sp + s))
        .fold(T::zero(), |a, b| a + b)
        / nb;
    let gt = g.clone();
    Ok(Var::record("dice", &[p], Tensor::scalar(loss), move |up, _| {
        let u = up.data()[0] / nb;
        let mut grad = Vec::with_capacity(gt.numel());
        for (b, &(i, sp, sg)) in sums.iter().enumerate() {
            let den = sg + sp + s;
            let num = T::lit(2.0) * i + s;
            grad.extend(
                gt.data()[b * per..(b + 1) * per]
                    .iter()
                    .map(|&gv| -u * (T::lit(2.0) * gv * den - num) / (den * den)),
            );
        }
        vec![Some(Tensor::new(gt.shape(), grad).expect("same shape"))]
    })?)
}

/// Supervised side outputs, in the order of the ablation table rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Output {
    D3,
    DLow,
    DHigh,
    Global,
    D2,
    D1,
}

impl Output {
    pub fn name(self) -> &'static str {
        match self {
            Output::D3 => "d3",
            Output::DLow => "d_low",
            Output::DHigh => "d_high",
            Output::Global => "g_f",
            Output::D2 => "d2",
            Output::D1 => "d1",
        }
    }

    /// Needs the auxiliary heads of [`ModelOutputs::aux`].
    pub fn is_aux(self) -> bool {
        matches!(self, Output::DLow | Output::DHigh | Output::Global)
    }
}

/// Deep-supervision layouts (a)–(f); (f) is the default granularity-aware one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Supervision {
    A,
    B,
    C,
    D,
    E,
    #[default]
    F,
}

impl Supervision {
    pub const ALL: [Supervision; 6] = [
        Supervision::A,
        Supervision::B,
        Supervision::C,
        Supervision::D,
        Supervision::E,
        Supervision::F,
    ];

    pub fn assignments(self) -> Vec<(Output, Target)> {
        use Output::*;
        use Target::*;
        match self {
            Supervision::A => vec![(D3, Full), (DLow, Full), (DHigh, Full), (Global, Full), (D2, Full), (D1, Full)],
            Supervision::B => vec![(D3, Full), (DLow, Boundary), (DHigh, Center), (D2, CenterOthers), (D1, BoundaryOthers)],
            Supervision::C => vec![(D3, Full), (DLow, Boundary), (DHigh, Others), (D2, CenterOthers), (D1, BoundaryOthers)],
            Supervision::D => vec![(D3, Full), (DLow, Boundary), (DHigh, CenterOthers), (D2, CenterOthers), (D1, BoundaryOthers)],
            Supervision::E => vec![(D3, Full), (Global, Center), (D1, BoundaryOthers)],
            Supervision::F => vec![(D3, Full), (D2, Center), (D1, BoundaryOthers)],
        }
    }

    pub fn needs_aux(self) -> bool {
        self.assignments().iter().any(|(o, _)| o.is_aux())
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "a" => Supervision::A,
            "b" => Supervision::B,
            "c" => Supervision::C,
            "d" => Supervision::D,
            "e" => Supervision::E,
            "f" => Supervision::F,
            other => return Err(Error::Config(format!("supervision setting must be a..f, got {other:?}"))),
        })
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Supervision::A => 'a',
            Supervision::B => 'b',
            Supervision::C => 'c',
            Supervision::D => 'd',
            Supervision::E => 'e',
            Supervision::F => 'f',
        };
        write!(f, "{c}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub output: Output,
    pub target: Target,
    pub bce: f64,
    pub dice: f64,
}

impl LossTerm {
    pub fn combined(&self) -> f64 {
        self.bce + self.dice
    }
}

#[derive(Debug, Clone)]
pub struct LossReport<'t, T: Real> {
    pub terms: Vec<LossTerm>,
    pub overall: Var<'t, T>,
}

impl<T: Real> LossReport<'_, T> {
    pub fn value(&self) -> f64 {
        self.overall.value().data()[0].as_f64()
    }
}

/// Stacks one target map per sample into `[N, 1, H, W]`.
pub fn stack_targets<T: Real>(targets: &[RegionTargets], which: Target) -> Result<Tensor<T>> {
    let first = targets.first().ok_or_else(|| invalid("no targets"))?;
    let (w, h) = (first.full.width(), first.full.height());
    let mut data = Vec::with_capacity(targets.len() * w * h);
    for t in targets {
        if (t.full.width(), t.full.height()) != (w, h) {
            return Err(invalid("targets in one batch must share an extent"));
        }
        data.extend(t.get(which).bits().iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    Ok(Tensor::new(&[targets.len(), 1, h, w], data)?)
}

fn select<'a, 't, T: Real>(out: &'a ModelOutputs<'t, T>, o: Output) -> Result<&'a Var<'t, T>> {
    let aux = || {
        out.aux
            .as_ref()
            .ok_or_else(|| invalid(format!("output {} needs the auxiliary heads", o.name())))
    };
    Ok(match o {
        Output::D1 => &out.p1,
        Output::D2 => &out.p2,
        Output::D3 => &out.p3,
        Output::DLow => &aux()?.p_low,
        Output::DHigh => &aux()?.p_high,
        Output::Global => &aux()?.p_global,
    })
}

/// Sum of `bce + dice` over the outputs the setting supervises.
pub fn overall_loss<'t, T: Real>(
    out: &ModelOutputs<'t, T>,
    targets: &[RegionTargets],
    setting: Supervision,
) -> Result<LossReport<'t, T>> {
    if targets.len() != out.p3.shape()[0] {
        return Err(invalid(format!(
            "{} targets for a batch of {}",
            targets.len(),
            out.p3.shape()[0]
        )));
    }
    let mut terms = Vec::new();
    let mut overall: Option<Var<'t, T>> = None;
    for (o, t) in setting.assignments() {
        let p = select(out, o)?;
        let g = stack_targets::<T>(targets, t)?;
        let b = bce(p, &g)?;
        let d = dice(p, &g)?;
        terms.push(LossTerm {
            output: o,
            target: t,
            bce: b.value().data()[0].as_f64(),
            dice: d.value().data()[0].as_f64(),
        });
        let sum = b.add(&d)?;
        overall = Some(match overall {
            Some(acc) => acc.add(&sum)?,
            None => sum,
        });
    }
    Ok(LossReport {
        terms,
        overall: overall.expect("every setting supervises d3"),
    })
}
