//! Central finite-difference oracle for checking analytic gradients.
//!
//! Only forward evaluations of the closure are used, so the oracle is
//! independent of the tape's backward rules.

use crate::tensor::Tensor;

/// Elements whose magnitude falls below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Largest elementwise `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

/// `Ok(max_err)` when the analytic gradient agrees within `rel_tol`.
pub fn check_gradient(analytic: &Tensor, numeric: &Tensor, rel_tol: f64) -> Result<f64, String> {
    if analytic.shape() != numeric.shape() {
        return Err(format!("shape {:?} vs {:?}", analytic.shape(), numeric.shape()));
    }
    let err = max_relative_error(analytic, numeric);
    if err < rel_tol {
        Ok(err)
    } else {
        Err(format!("max relative error {err:e} exceeds {rel_tol:e}"))
    }
}
