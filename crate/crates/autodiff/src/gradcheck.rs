//! Central finite-difference verification of tape gradients.
//!
//! The loss builder is re-run in `f64` for every perturbed element, so the
//! check measures the backward rules rather than single-precision noise.

use crate::{ParamId, ParamStore, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
    /// near-zero gradients from turning rounding noise into large ratios.
    pub floor: f64,
    /// Check at most this many elements per parameter (evenly strided).
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            floor: 1e-3,
            max_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `build` against central differences for
/// every parameter in `store`.
///
/// `build` must construct the loss from parameters bound with
/// [`Tape::param`] and be a pure function of the store contents.
pub fn check<F>(
    store: &ParamStore<f64>,
    build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;
    let analytic: Vec<Vec<f64>> = work
        .ids()
        .map(|id| work.get(id).grad().map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let l = build(&mut t, s)?;
        Ok(t.item(l))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<ParamId> = work.ids().collect();
    for id in ids {
        let n = work.get(id).len();
        let stride = match opts.max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[id.index()].get(i).copied().unwrap_or(0.0);
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_none() {
                report.max_rel_err = err.max(report.max_rel_err);
                if err >= report.max_rel_err {
                    report.worst_param = Some(work.name(id).to_string());
                    report.worst_index = i;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
