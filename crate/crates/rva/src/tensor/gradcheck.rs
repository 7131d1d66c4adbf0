//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use super::{GradMap, ParamSet, Result, TensorError};

/// Relative error between an analytic and a numeric derivative:
/// |analytic - numeric| / max(1, |analytic|).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Checks `analytic` against central differences of `loss` for every
/// coordinate of every parameter; returns the per-parameter maximum
/// relative error. Run this in 64-bit precision only — at 32 bits the
/// differences drown in rounding noise.
pub fn finite_diff_check_detailed<F>(
    mut loss: F,
    params: &ParamSet,
    analytic: &GradMap,
    eps: f64,
) -> Result<BTreeMap<String, f64>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "finite_diff_check",
            reason: format!("eps {eps} must be positive"),
        });
    }
    let mut report = BTreeMap::new();
    let mut work = params.clone();
    for (name, t) in params.iter() {
        let grad = analytic.get(name);
        let mut worst: f64 = 0.0;
        for i in 0..t.data.len() {
            let a = grad.map_or(0.0, |g| g.data[i]);
            let orig = t.data[i];
            work.get_mut(name)?.data[i] = orig + eps;
            let up = loss(&work)?;
            work.get_mut(name)?.data[i] = orig - eps;
            let down = loss(&work)?;
            work.get_mut(name)?.data[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "finite_diff_check",
                });
            }
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(a, numeric));
        }
        report.insert(name.clone(), worst);
    }
    Ok(report)
}

/// Maximum relative error over all coordinates of all parameters.
pub fn finite_diff_check<F>(
    loss: F,
    params: &ParamSet,
    analytic: &GradMap,
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let report = finite_diff_check_detailed(loss, params, analytic, eps)?;
    Ok(report.values().cloned().fold(0.0, f64::max))
}
