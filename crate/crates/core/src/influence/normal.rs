//! Standard Gaussian distribution function, density and truncated moments.

use crate::error::{domain, Result};

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(a: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * a * a).exp()
}

/// `F(a) = P(W <= a)` for `W ~ N(0, 1)`.
///
/// Evaluated through `erfc` on the side where it does not cancel, so both
/// tails keep full relative precision.
#[inline]
pub fn std_normal_cdf(a: f64) -> f64 {
    0.5 * libm::erfc(-a * FRAC_1_SQRT_2)
}

/// `E[1(W <= a) W^p]` for `p` in `0..=4`.
pub fn truncated_moment(a: f64, p: u32) -> Result<f64> {
    if !a.is_finite() {
        return domain(format!("truncation point must be finite, got {a}"));
    }
    let f = std_normal_cdf(a);
    let g = std_normal_pdf(a);
    let value = match p {
        0 => f,
        1 => -g,
        2 => f - a * g,
        3 => -(a * a + 2.0) * g,
        4 => 3.0 * f - (a * a * a + 3.0 * a) * g,
        _ => return domain(format!("moment order {p} outside 0..=4")),
    };
    Ok(value)
}
