use std::collections::BTreeMap;

use super::{Bound, ParameterStore, Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Flat index where the largest error occurred.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

/// Checks `f` (scalar-valued) at `x` with step `h`; passes when every
/// entry's error is below `tol`.
///
/// Errors are relative to the larger gradient magnitude, floored at one so
/// that entries with near-zero gradient are judged by absolute error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_with(f, x, h, tol, |_, _| false)
}

/// Like [`grad_check`], but entries for which `skip(index, value)` holds are
/// excluded (for example inputs within a few steps of a relu kink).
pub fn grad_check_with<F, S>(f: F, x: &Tensor, h: f64, tol: f64, skip: S) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
    S: Fn(usize, f64) -> bool,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(xv)?;
    tape.backward(y)?;
    let analytic = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(t);
        f(v)?.item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    for i in 0..x.numel() {
        if skip(i, x.data()[i]) {
            report.skipped += 1;
            continue;
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// Gradient check of a scalar loss with respect to stored parameters.
///
/// `select(path, index)` picks which entries to perturb; every selected entry
/// costs two evaluations of `f`. Returns one report per parameter path.
pub fn grad_check_params<F, S>(
    store: &ParameterStore,
    f: F,
    h: f64,
    tol: f64,
    select: S,
) -> Result<BTreeMap<String, GradCheckReport>>
where
    F: for<'t> Fn(&Bound<'t>) -> Result<Var<'t>>,
    S: Fn(&str, usize) -> bool,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let loss = f(&bound)?;
    tape.backward(loss)?;

    let eval = |s: &ParameterStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = s.bind_frozen(&tape);
        f(&bound)?.item()
    };

    let mut work = store.clone();
    let mut out = BTreeMap::new();
    for (path, param) in store.iter() {
        let analytic = tape
            .grad(bound.get(path)?)
            .unwrap_or_else(|| Tensor::zeros(param.value.shape().to_vec()));
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_index: None,
            checked: 0,
            skipped: 0,
            passed: true,
        };
        for i in 0..param.value.numel() {
            if !select(path, i) {
                report.skipped += 1;
                continue;
            }
            let orig = param.value.data()[i];
            let slot = |w: &mut ParameterStore, v: f64| {
                w.get_mut(path).expect("cloned store").value.data_mut()[i] = v;
            };
            slot(&mut work, orig + h);
            let up = eval(&work)?;
            slot(&mut work, orig - h);
            let down = eval(&work)?;
            slot(&mut work, orig);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if report.worst_index.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = Some(i);
            }
        }
        report.passed = report.max_rel_error < tol;
        out.insert(path.to_string(), report);
    }
    Ok(out)
}
