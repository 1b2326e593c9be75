use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn clamp_log_std(v: f64) -> f64 {
    v.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

/// Diagonal Gaussian log-density with `log_std` clamped to the configured range.
pub fn gaussian_logpdf(mean: &[f64], log_std: &[f64], x: &[f64]) -> Result<f64> {
    if mean.len() != log_std.len() || mean.len() != x.len() {
        return Err(Error::Shape(format!(
            "gaussian_logpdf lengths: mean {}, log_std {}, x {}",
            mean.len(),
            log_std.len(),
            x.len()
        )));
    }
    Ok(diag_logpdf(mean, log_std, x))
}

/// Unchecked variant of [`gaussian_logpdf`] for inner loops.
#[inline]
pub fn diag_logpdf(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&m, &ls), &xv) in mean.iter().zip(log_std).zip(x) {
        let ls = clamp_log_std(ls);
        let z = (xv - m) * (-ls).exp();
        acc += -0.5 * z * z - ls - HALF_LN_2PI;
    }
    acc
}

/// Diagonal Gaussian log-density parameterised by variance (no clamping).
#[inline]
pub fn diag_logpdf_var(mean: &[f64], var: &[f64], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&m, &v), &xv) in mean.iter().zip(var).zip(x) {
        let d = xv - m;
        acc += -0.5 * d * d / v - 0.5 * (2.0 * PI * v).ln();
    }
    acc
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
