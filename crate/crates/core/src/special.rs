//! Standard normal helpers on top of `statrs` error functions.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use statrs::function::erf;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn norm_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// `Φ(x)`, accurate in the lower tail.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x * FRAC_1_SQRT_2)
}

/// `erf(x/√2) = 2Φ(x) - 1`.
#[inline]
pub fn erf_scaled(x: f64) -> f64 {
    erf::erf(x * FRAC_1_SQRT_2)
}

/// `Φ⁻¹(u)` for `u ∈ (0, 1)`, polished with one Newton step against the
/// tail-accurate CDF.
pub fn norm_inv_cdf(u: f64) -> f64 {
    if u > 0.5 {
        // 1 - u is exact here
        return -norm_inv_cdf(1.0 - u);
    }
    let x = -SQRT_2 * erf::erfc_inv(2.0 * u);
    if !x.is_finite() {
        return x;
    }
    let pdf = norm_pdf(x);
    if pdf > 0.0 {
        x - (norm_cdf(x) - u) / pdf
    } else {
        x
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_cdf_roundtrip() {
        for &x in &[-30.0, -8.0, -3.0, -1.0, -1e-3, 0.0] {
            let u = norm_cdf(x);
            assert!((norm_inv_cdf(u) - x).abs() < 1e-13 * (1.0 + x.abs()), "x={x}");
        }
        // upper-tail inputs are limited by the spacing of doubles near 1
        for &x in &[0.5, 2.0, 5.0] {
            let u = norm_cdf(x);
            assert!((norm_inv_cdf(u) - x).abs() < 1e-8, "x={x}");
        }
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((norm_log_pdf(0.7) - norm_pdf(0.7).ln()).abs() < 1e-14);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
