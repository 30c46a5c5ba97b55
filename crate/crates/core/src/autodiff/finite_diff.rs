//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::Result;

/// Compares analytic gradients of a rebuilt scalar loss against central
/// finite differences, entry by entry, over every given parameter.
///
/// `f` must rebuild the loss from the parameters' current values with all
/// randomness frozen. Returns the worst relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: FnMut() -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut worst = 0.0f64;
    for (p, grads) in params.iter().zip(&analytic) {
        for i in 0..p.len() {
            p.nudge(i, step);
            let up = f()?.item()?;
            p.nudge(i, -2.0 * step);
            let down = f()?.item()?;
            p.nudge(i, step);

            let numeric = (up - down) / (2.0 * step);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
