//! Central finite-difference gradient checking.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

impl GradCheckOptions {
    pub fn new(step: f64, tol: f64) -> Self {
        GradCheckOptions {
            step,
            tol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            checked: 0,
            passed: true,
        }
    }

    /// Combines two reports, keeping the worst entry.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let (worst, idx) = if other.max_rel_error > self.max_rel_error {
            (other.max_rel_error, other.worst_index)
        } else {
            (self.max_rel_error, self.worst_index)
        };
        GradCheckReport {
            max_rel_error: worst,
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            worst_index: idx,
            checked: self.checked + other.checked,
            passed: self.passed && other.passed,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of a scalar function.
///
/// `eval_shifted(i, delta)` must return the function value with entry `i`
/// of the checked input shifted by `delta` (and leave the input unchanged
/// afterwards).
pub fn finite_difference_check(
    analytic: &[f64],
    opts: GradCheckOptions,
    mut eval_shifted: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::empty();
    for (i, &a) in analytic.iter().enumerate() {
        let plus = eval_shifted(i, opts.step)?;
        let minus = eval_shifted(i, -opts.step)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite function value while perturbing entry {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let rel = relative_error(a, numeric, opts.floor);
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        report.checked += 1;
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}

/// Checks the tape gradient of a scalar-valued `f` at `x`.
pub fn check_gradient<F>(f: F, x: &Tensor, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    x.ensure_finite("gradient-check input")?;
    let eval = |t: Tensor| -> Result<(f64, Tape, Var, Var)> {
        let mut tape = Tape::new();
        let xv = tape.param(t);
        let out = f(&mut tape, xv)?;
        let value = tape.value(out).sum();
        if !value.is_finite() {
            return Err(Error::Evaluation("function value is not finite".into()));
        }
        Ok((value, tape, xv, out))
    };
    let (_, tape, xv, out) = eval(x.clone())?;
    let analytic = tape
        .backward(out)?
        .take(xv)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    finite_difference_check(&analytic, opts, |i, delta| {
        let mut shifted = x.clone();
        shifted.data_mut()[i] += delta;
        eval(shifted).map(|(v, ..)| v)
    })
}
