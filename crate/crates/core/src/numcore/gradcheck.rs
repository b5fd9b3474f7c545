//! Central finite-difference verification of analytic gradients.

use crate::error::{NcuError, Result};

/// Floor applied to `|analytic|` when forming relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub param_count: usize,
    /// Parameter with the largest relative error.
    pub worst_param_index: usize,
}

/// Compares `grad_fn(point)` against `(f(x + h·e_k) − f(x − h·e_k)) / 2h` for every coordinate `k`.
pub fn central_diff_check<L, G>(loss_fn: L, grad_fn: G, point: &[f64], step: f64) -> Result<GradReport>
where
    L: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    assert!(step > 0.0, "step must be positive");
    let analytic = grad_fn(point);
    assert_eq!(analytic.len(), point.len(), "gradient length must match the point");

    let mut x = point.to_vec();
    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        param_count: point.len(),
        worst_param_index: 0,
    };
    for k in 0..point.len() {
        x[k] = point[k] + step;
        let plus = loss_fn(&x);
        x[k] = point[k] - step;
        let minus = loss_fn(&x);
        x[k] = point[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NcuError::NonFiniteLoss { index: k });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let abs = (analytic[k] - numeric).abs();
        let rel = abs / analytic[k].abs().max(REL_ERROR_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param_index = k;
        }
    }
    Ok(report)
}
