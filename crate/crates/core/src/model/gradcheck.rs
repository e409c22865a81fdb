//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::loss::{example_loss, TrainingExample};
use super::ModelParams;
use crate::error::Result;
use crate::seed;

/// Denominator floor for the relative error, so that two tiny gradients
/// compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `analytic` against central differences of `f` at `indices`.
pub fn check_indices<F>(x: &mut [f64], analytic: &[f64], indices: &[usize], epsilon: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &i in indices {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = f(x)?;
        x[i] = orig - epsilon;
        let minus = f(x)?;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// Random subsample of `fraction` of `0..n` (at least one index), sorted.
pub fn subsample(n: usize, fraction: f64, seed_value: u64) -> Vec<usize> {
    let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1)).min(n);
    let mut rng = seed::rng(seed::stream_seed(seed_value, "gradcheck", 0));
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Maximum relative error between the analytic gradient of the total loss
/// on `example` and central differences over a random 1% of parameters.
pub fn grad_check(params: &ModelParams, example: &TrainingExample, epsilon: f64, seed_value: u64) -> Result<GradCheckReport> {
    grad_check_fraction(params, example, epsilon, 0.01, seed_value)
}

pub fn grad_check_fraction(
    params: &ModelParams,
    example: &TrainingExample,
    epsilon: f64,
    fraction: f64,
    seed_value: u64,
) -> Result<GradCheckReport> {
    let (_, grad) = example_loss(params, example, true)?;
    let grad = grad.expect("gradient requested");
    let indices = subsample(params.data.len(), fraction, seed_value);
    let mut probe = params.clone();
    let mut x = std::mem::take(&mut probe.data);
    check_indices(&mut x, &grad, &indices, epsilon, |v| {
        probe.data.clear();
        probe.data.extend_from_slice(v);
        Ok(example_loss(&probe, example, false)?.0.total)
    })
}
