//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares an analytic gradient against central differences.
///
/// `f` returns the function value together with its analytic gradient at the
/// given point. The result is the largest per-coordinate relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_difference_check<F>(mut f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteFunction { coord: 0 });
    }
    if analytic.len() != x.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient length {} vs point length {}",
            analytic.len(),
            x.len()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (k, &an) in analytic.iter().enumerate() {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + step;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[k] = orig - step;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteFunction { coord: k });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let denom = an.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((an - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_nearly_exact() {
        let err = finite_difference_check(
            |x| Ok((x.item() * x.item(), vec![2.0 * x.item()])),
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let err = finite_difference_check(
            |x| Ok((x.item() * x.item(), vec![3.0 * x.item()])),
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err > 0.3);
    }

    #[test]
    fn rejects_bad_step_and_nonfinite_values() {
        let f = |x: &Tensor| Ok((x.item(), vec![1.0]));
        assert!(finite_difference_check(f, &Tensor::scalar(1.0), 0.0).is_err());
        let g = |x: &Tensor| Ok((x.item().ln(), vec![1.0 / x.item()]));
        assert!(matches!(
            finite_difference_check(g, &Tensor::scalar(1e-7), 1e-5),
            Err(Error::NonFiniteFunction { coord: 0 })
        ));
    }
}
