//! Central finite-difference verification of analytic gradients.

use super::{Scalar, Tensor};

/// Magnitudes below this are compared absolutely rather than relatively, so
/// that coordinates whose true gradient is zero do not divide rounding noise
/// by zero.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, if any coordinates were checked.
    pub worst_index: Option<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` with `(L(p + h·e_i) − L(p − h·e_i)) / 2h` for every
/// coordinate `i`. The closure must be deterministic.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "one analytic component per parameter");
    let mut probe = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst_index = None;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = loss(&probe);
        probe[i] = params[i] - h;
        let down = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if !(err <= max_rel_error) {
            max_rel_error = err;
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        coordinates: params.len(),
        max_rel_error,
        worst_index,
        tolerance,
        passed: max_rel_error < tolerance,
    }
}

/// Concatenates parameter tensors into one `f64` vector, in order.
pub fn flatten<T: Scalar>(tensors: &[&Tensor<T>]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().map(|x| x.as_f64())).collect()
}

/// Inverse of [`flatten`]. Panics if `values` has the wrong length.
pub fn unflatten<T: Scalar>(tensors: &mut [&mut Tensor<T>], values: &[f64]) {
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    assert_eq!(total, values.len(), "flat parameter length");
    let mut rest = values;
    for t in tensors.iter_mut() {
        let (head, tail) = rest.split_at(t.len());
        t.data_mut().iter_mut().zip(head).for_each(|(x, &v)| *x = T::lit(v));
        rest = tail;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let p = [0.3, -1.2, 2.5, 0.0, 7.0];
        let loss = |q: &[f64]| q.iter().map(|x| x * x).sum::<f64>() / 2.0;
        let report = grad_check(loss, &p, &p, 1e-5, 1e-9);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn doubled_gradient_fails() {
        let p = [0.3, -1.2, 2.5];
        let wrong: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        let loss = |q: &[f64]| q.iter().map(|x| x * x).sum::<f64>() / 2.0;
        let report = grad_check(loss, &p, &wrong, 1e-5, 1e-4);
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.4);
    }

    #[test]
    fn nan_counts_as_failure() {
        let report = grad_check(|_| f64::NAN, &[1.0], &[1.0], 1e-5, 1e-4);
        assert!(!report.passed);
    }
}
