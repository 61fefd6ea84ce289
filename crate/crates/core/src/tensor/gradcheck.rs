//! Central finite differences for checking analytic gradients.
//!
//! Only forward evaluations of the function under test are used here, so the
//! numeric gradient is independent of the backward pass it is compared with.

use super::Tensor;
use crate::error::Result;

/// Relative error with the denominator floored at `1e-6`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference gradient of `f` with respect to every entry of every
/// input. `max_entries` caps the number of probed entries per input (evenly
/// strided); unprobed entries are `NaN`.
pub fn numeric_gradient(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    h: f64,
    max_entries: Option<usize>,
) -> Result<Vec<Tensor>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let n = inputs[ti].numel();
        let step = match max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut grad = vec![f64::NAN; n];
        for j in (0..n).step_by(step) {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let plus = f(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let minus = f(&work)?;
            work[ti].data_mut()[j] = orig;
            grad[j] = (plus - minus) / (2.0 * h);
        }
        out.push(Tensor::new(inputs[ti].shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Largest relative error over the probed (non-NaN) entries.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .filter(|(_, n)| !n.is_nan())
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}
