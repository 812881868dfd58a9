//! Central finite-difference gradient checker.

use crate::error::{Error, Result};

/// Compares `analytic` against central finite differences of `loss` at
/// `params`, returning the maximum relative error over all coordinates:
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e−12)`.
///
/// `loss` must be deterministic; a non-finite loss value aborts the check.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape(
            "grad_check",
            params.len().to_string(),
            analytic.len().to_string(),
        ));
    }
    let mut work = params.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        work[i] = params[i] + epsilon;
        let up = finite(loss(&work)?)?;
        work[i] = params[i] - epsilon;
        let down = finite(loss(&work)?)?;
        work[i] = params[i];
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            component: "grad_check loss".into(),
        })
    }
}
