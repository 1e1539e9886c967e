//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<WorstCoordinate>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences over every coordinate of `params` (all parameters when empty).
pub fn grad_check<F>(store: &ParamStore, params: &[ParamId], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    compare_gradients(store, params, eps, &analytic, f)
}

/// Like [`grad_check`] but against a caller-supplied analytic gradient.
pub fn compare_gradients<F>(
    store: &ParamStore,
    params: &[ParamId],
    eps: f64,
    analytic: &Gradients,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Domain(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }
    let all: Vec<ParamId>;
    let params = if params.is_empty() {
        all = store.ids().collect();
        &all[..]
    } else {
        params
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for &id in params {
        for idx in 0..work.get(id).data().len() {
            let original = work.get(id).data()[idx];
            work.get_mut(id).data_mut()[idx] = original + eps;
            let plus = evaluate(&work, &f)?;
            work.get_mut(id).data_mut()[idx] = original - eps;
            let minus = evaluate(&work, &f)?;
            work.get_mut(id).data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[idx];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(WorstCoordinate {
                    param: store.name(id).to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}
