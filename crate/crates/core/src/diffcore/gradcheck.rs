use super::ParamSet;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamSet, eps: f64) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference eps {eps}")));
    }
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + eps;
        probe.set_flat(&flat)?;
        let up = f(&probe)?;
        flat[i] = base[i] - eps;
        probe.set_flat(&flat)?;
        let down = f(&probe)?;
        flat[i] = base[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        out.push((up - down) / (2.0 * eps));
    }
    let mut grad = params.zeros_like();
    grad.set_flat(&out)?;
    Ok(grad)
}

/// Largest element-wise relative error between two gradients.
///
/// Entries whose absolute difference is at most `abs_floor` count as exact.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet, abs_floor: f64) -> Result<f64> {
    a.check_layout(b)?;
    Ok(a.values()
        .zip(b.values())
        .map(|(x, y)| {
            let diff = (x - y).abs();
            if diff <= abs_floor {
                0.0
            } else {
                diff / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max))
}
