//! Central finite-difference check of tape gradients.

use super::{NumError, ParamId, ParamStore, Tape, Var};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Below this magnitude the
/// comparison degrades gracefully to an absolute one; float64 central
/// differences of O(1) losses carry roughly 1e-10 absolute noise.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Entry with the largest relative error.
    pub worst: Option<GradMismatch>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckOptions {
    /// Finite-difference step; `FD_STEP` when zero.
    pub step: f64,
    /// Restrict the check to these parameters (all when `None`).
    pub only: Option<Vec<ParamId>>,
    /// Debug hook: perturbs the autodiff gradient of this parameter before
    /// comparison, simulating a broken backward rule.
    pub corrupt: Option<ParamId>,
}

/// Compares autodiff gradients of the scalar built by `f` against central
/// finite differences for every entry of every (selected) parameter.
///
/// `params` is perturbed in place and restored entry by entry.
pub fn grad_check<F>(params: &mut ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NumError>,
{
    let step = if opts.step > 0.0 { opts.step } else { FD_STEP };

    let mut grads = {
        let mut tape = Tape::with_params(params);
        let loss = f(&mut tape)?;
        tape.backward(loss)?;
        tape.param_grads()
    };
    if let Some(bad) = opts.corrupt {
        let n = params.get(bad).numel();
        let mut delta = vec![0.0; n];
        delta[0] = 1.0;
        grads.add(bad, &delta, 1.0);
    }

    let eval = |p: &ParamStore| -> Result<f64, NumError> {
        let mut tape = Tape::with_params(p);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let ids: Vec<ParamId> = match &opts.only {
        Some(ids) => ids.clone(),
        None => params.ids().collect(),
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, entries_checked: 0 };
    for id in ids {
        let n = params.get(id).numel();
        for k in 0..n {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + step;
            let plus = eval(params);
            params.get_mut(id).data_mut()[k] = orig - step;
            let minus = eval(params);
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |g| g[k]);
            let rel_err = relative_error(analytic, numeric);
            report.entries_checked += 1;
            if rel_err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel_err);
                if report.worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
                    report.worst =
                        Some(GradMismatch { param: params.name(id).to_string(), index: k, analytic, numeric, rel_err });
                }
            }
        }
    }
    Ok(report)
}
