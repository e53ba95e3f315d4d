//! Central finite-difference gradient checking.
//!
//! Relative error per entry is `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`.
//! The floor keeps entries whose true gradient is ~0 from turning float
//! round-off into huge ratios; below it the comparison is effectively absolute.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of `build(tape, inputs) -> scalar` against central
/// differences for every entry of every named input.
pub fn check<F>(inputs: &[(String, Tensor)], eps: f64, build: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.param(v.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    for (k, (name, original)) in inputs.iter().enumerate() {
        let mut report = GradReport {
            name: name.clone(),
            entries: original.numel(),
            max_rel_err: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..original.numel() {
            let x = original.data()[e];
            values[k].data_mut()[e] = x + eps;
            let plus = eval(&values)?;
            values[k].data_mut()[e] = x - eps;
            let minus = eval(&values)?;
            values[k].data_mut()[e] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[e];
            let err = rel_err(a, numeric);
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst_entry = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Largest relative error over a set of reports.
pub fn worst(reports: &[GradReport]) -> Option<&GradReport> {
    reports.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
}
