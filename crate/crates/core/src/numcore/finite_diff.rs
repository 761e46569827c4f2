//! Central finite-difference gradient oracle.

use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central differences with a per-coordinate step `h·max(1, |x_i|)`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: Option<f64>) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    let base = h.unwrap_or(DEFAULT_STEP);
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let xi = x.data()[i];
        let step = base * xi.abs().max(1.0);
        probe.data_mut()[i] = xi + step;
        let plus = f(&probe);
        probe.data_mut()[i] = xi - step;
        let minus = f(&probe);
        probe.data_mut()[i] = xi;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!("non-finite evaluation at coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or zero when both are negligible.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.norm_sq(), &x, None).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.5, &x, None).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_is_oracle_failure() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        let err = finite_diff_grad(|t| 1.0 / (t.data()[0] - 1e-5), &x, None).unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }
}
