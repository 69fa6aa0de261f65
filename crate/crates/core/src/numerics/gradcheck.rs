use super::Tensor;
use crate::error::{arg_err, Error, Result};

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return arg_err("finite difference step must be positive");
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} (+h: {fp}, -h: {fm})"
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Max |a - b| over the largest |b| entry (floored at `floor`).
pub fn max_relative_error(analytic: &Tensor, reference: &Tensor, floor: f64) -> f64 {
    let scale = reference
        .data()
        .iter()
        .fold(floor, |m, v| m.max(v.abs()));
    analytic
        .max_abs_diff(reference)
        .map(|d| d / scale)
        .unwrap_or(f64::INFINITY)
}
