//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Compares an analytic gradient to central finite differences of `loss_fn`
/// at the sampled coordinates and returns the maximum relative error,
/// measured against max(|analytic|, |numeric|, 1e-12).
///
/// `coords` selects which parameter coordinates to probe; pass all indices
/// for an exhaustive check.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if step <= 0.0 {
        return Err(Error::Parameter {
            name: "step",
            message: format!("step must be positive, got {step}"),
        });
    }
    if analytic.len() != params.len() {
        return Err(Error::dimension("gradient length", params.len(), analytic.len()));
    }
    let mut work = params.to_vec();
    let mut max_rel: f64 = 0.0;
    for &i in coords {
        let orig = work[i];
        work[i] = orig + step;
        let plus = loss_fn(&work);
        work[i] = orig - step;
        let minus = loss_fn(&work);
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Training(format!(
                "finite-difference probe at coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

/// Deterministically spreads `count` sample coordinates over `len` indices.
pub fn sample_coords(len: usize, count: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    if count >= len {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count).collect()
}
