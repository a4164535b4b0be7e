//! Reverse-mode differentiation of the registration pipeline.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Maximum relative disagreement between an analytic gradient and central
/// differences: `max_i |g[i] - g_fd[i]| / (|g_fd[i]| + 1e-8)`.
///
/// `f` returns the value and its analytic gradient at a point.
pub fn fd_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let (value, grad) = f(point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("function value at the check point".into()));
    }
    if grad.len() != point.len() {
        return Err(Error::Shape(format!("gradient has {} entries for {} parameters", grad.len(), point.len())));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let (up, _) = f(&x)?;
        x[i] = point[i] - step;
        let (down, _) = f(&x)?;
        x[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("function value near parameter {i}")));
        }
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((grad[i] - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok(worst)
}
