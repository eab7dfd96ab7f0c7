//! Standard normal density, distribution function and the log-domain helpers
//! needed by probit moment matching.

use std::f64::consts::{PI, SQRT_2};

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Below this argument `log_cdf` switches to the asymptotic tail series.
const TAIL: f64 = -10.0;

pub fn pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub fn log_pdf(z: f64) -> f64 {
    -0.5 * z * z - HALF_LN_2PI
}

/// Φ(z) via the complementary error function.
pub fn cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// log Φ(z), stable for very negative `z`.
pub fn log_cdf(z: f64) -> f64 {
    if z < TAIL {
        // log Φ(z) = log φ(z) - log(-z) + log(1 - 1/z² + 3/z⁴ - 15/z⁶ + 105/z⁸)
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)
            + 105.0 / (z2 * z2 * z2 * z2);
        log_pdf(z) - (-z).ln() + series.ln()
    } else if z > 5.0 {
        // Φ close to one: log(1 - Φ(-z)) without cancellation.
        (-cdf(-z)).ln_1p()
    } else {
        cdf(z).ln()
    }
}

/// Inverse Mills ratio φ(z)/Φ(z).
pub fn inv_mills(z: f64) -> f64 {
    if z < TAIL {
        (log_pdf(z) - log_cdf(z)).exp()
    } else {
        pdf(z) / cdf(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert!((cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((cdf(-2.0) - 0.022_750_131_948_179_2).abs() < 1e-15);
    }

    #[test]
    fn log_cdf_tail_matches_direct_evaluation_near_switch() {
        for &z in &[-9.0, -10.0, -11.0, -12.0] {
            let direct = cdf(z).ln();
            assert!((log_cdf(z) - direct).abs() < 1e-6 * direct.abs(), "z={z}");
        }
        assert!(log_cdf(-40.0).is_finite());
        assert!(log_cdf(-40.0) < -800.0);
    }

    #[test]
    fn inv_mills_asymptote() {
        assert!((inv_mills(0.0) - (2.0 / PI).sqrt()).abs() < 1e-15);
        // φ(z)/Φ(z) ~ -z for z -> -inf
        let z = -30.0;
        assert!((inv_mills(z) / -z - 1.0).abs() < 2e-3);
        assert!(inv_mills(8.0) < 1e-13);
    }
}
