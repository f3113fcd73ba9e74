//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]. Central differences of an O(1)
/// loss carry roughly `1e-16 / step` of rounding noise, so gradients that are
/// exactly zero cannot be resolved in relative terms below this scale.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub leaves: Vec<LeafReport>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

fn evaluate<F>(f: &F, leaves: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = leaves.iter().map(|l| tape.constant(l.clone())).collect();
    let out = f(&tape, &vars)?;
    out.item()
}

/// Compares reverse-mode gradients of the scalar program `f` against central
/// differences with step `step`, element by element over every leaf.
///
/// `f` is evaluated twice at the base point first; differing results are
/// reported as [`Error::NonDeterministic`].
pub fn grad_check<F>(f: F, leaves: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let first = evaluate(&f, leaves)?;
    let second = evaluate(&f, leaves)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::<f64>::new();
        let vars: Vec<_> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, grad) in analytic.iter().enumerate() {
        let mut report = LeafReport {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..leaves[li].numel() {
            let base = leaves[li].data()[j];
            work[li].data_mut()[j] = base + step;
            let plus = evaluate(&f, &work)?;
            work[li].data_mut()[j] = base - step;
            let minus = evaluate(&f, &work)?;
            work[li].data_mut()[j] = base;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || j == 0 {
                report = LeafReport {
                    max_rel_err: err.max(report.max_rel_err),
                    worst_index: j,
                    analytic: a,
                    numeric,
                };
            }
        }
        reports.push(report);
    }
    Ok(GradReport {
        leaves: reports,
        tolerance,
    })
}
