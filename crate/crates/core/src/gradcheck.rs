//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A model with a flat parameter vector, a scalar loss and its analytic gradient.
pub trait Differentiable<T: Scalar> {
    fn param_count(&self) -> usize;
    fn param(&self, index: usize) -> T;
    fn set_param(&mut self, index: usize, value: T);
    fn loss(&self) -> Result<T>;
    fn gradient(&self) -> Result<Vec<T>>;
}

pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::lit(1e-12));
    (analytic - numeric).abs() / denom
}

/// Largest relative error between the analytic gradient and central
/// differences `(L(θ+ε) − L(θ−ε)) / 2ε`, over every parameter.
/// A model with no parameters checks to zero.
pub fn grad_check<T, M>(model: &M, epsilon: T) -> Result<T>
where
    T: Scalar,
    M: Differentiable<T> + Clone,
{
    if !(epsilon > T::zero() && epsilon <= T::lit(1e-2)) {
        return Err(Error::validation(format!("epsilon must lie in (0, 1e-2], got {epsilon}")));
    }
    let analytic = model.gradient()?;
    if analytic.len() != model.param_count() {
        return Err(Error::DimensionMismatch {
            expected: model.param_count(),
            actual: analytic.len(),
        });
    }
    let mut probe = model.clone();
    let mut worst = T::zero();
    for (i, &a) in analytic.iter().enumerate() {
        let original = probe.param(i);
        probe.set_param(i, original + epsilon);
        let plus = probe.loss()?;
        probe.set_param(i, original - epsilon);
        let minus = probe.loss()?;
        probe.set_param(i, original);
        let numeric = (plus - minus) / (T::lit(2.0) * epsilon);
        let err = relative_error(a, numeric);
        if err > worst || err.is_nan() {
            worst = err;
        }
    }
    Ok(worst)
}
