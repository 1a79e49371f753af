use serde::Serialize;

use super::Parameterized;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst element.
    pub worst: Option<String>,
    pub checked_elements: usize,
    pub skipped_frozen: usize,
}

/// Compares the gradients currently accumulated in `model`'s trainable
/// parameters against central differences `(f(θ+h) - f(θ-h)) / 2h`.
///
/// The error for each element is `|analytic - numeric| / max(1, |analytic|)`.
/// Frozen parameters are never perturbed. Parameter values are restored
/// bit-exactly after each probe.
pub fn check_gradient<M, F>(model: &mut M, mut loss: F, h: f64) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&M) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let analytic: Vec<Option<Vec<f64>>> = model
        .parameters()
        .iter()
        .map(|p| p.is_trainable().then(|| p.gradient().into_vec()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked_elements: 0,
        skipped_frozen: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else {
            report.skipped_frozen += 1;
            continue;
        };
        for (e, &g) in grad.iter().enumerate() {
            let orig = model.parameters()[pi].value.as_slice()[e];
            model.parameters_mut()[pi].value.as_mut_slice()[e] = orig + h;
            let plus = loss(model)?;
            model.parameters_mut()[pi].value.as_mut_slice()[e] = orig - h;
            let minus = loss(model)?;
            model.parameters_mut()[pi].value.as_mut_slice()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while probing {}[{e}]",
                    model.parameters()[pi].name
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = (g - numeric).abs() / g.abs().max(1.0);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some(format!("{}[{e}]", model.parameters()[pi].name));
            }
            report.checked_elements += 1;
        }
    }
    Ok(report)
}
