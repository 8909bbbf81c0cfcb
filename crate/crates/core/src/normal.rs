//! Standard normal helpers with tail-stable log-CDF and inverse Mills ratio.

use libm::erfc;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Below this point the ratio `Φ(x)/φ(x)` is evaluated by continued fraction.
const TAIL_CUTOFF: f64 = -8.0;

pub fn pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `Φ(x)/φ(x)` for `x < 0`, via the Laplace continued fraction.
fn tail_ratio(x: f64) -> f64 {
    let a = -x;
    let mut frac = a;
    for k in (1..=60).rev() {
        frac = a + k as f64 / frac;
    }
    1.0 / frac
}

pub fn log_cdf(x: f64) -> f64 {
    if x < TAIL_CUTOFF {
        -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln() + tail_ratio(x).ln()
    } else {
        cdf(x).ln()
    }
}

/// Inverse Mills ratio `φ(x)/Φ(x)`.
pub fn mills(x: f64) -> f64 {
    if x < TAIL_CUTOFF {
        1.0 / tail_ratio(x)
    } else {
        pdf(x) / cdf(x)
    }
}

/// Quantile function of the standard normal distribution.
pub fn quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_values() {
        assert_eq!(cdf(0.0), 0.5);
        assert!((mills(0.0) - 2.0 * FRAC_1_SQRT_2PI).abs() < 1e-15);
        assert!(quantile(0.5).abs() < 1e-12);
    }

    #[test]
    fn tail_branch_is_continuous() {
        let left = mills(TAIL_CUTOFF - 1e-12);
        let right = mills(TAIL_CUTOFF + 1e-12);
        assert!((left - right).abs() / right < 1e-8);
        let left = log_cdf(TAIL_CUTOFF - 1e-12);
        let right = log_cdf(TAIL_CUTOFF + 1e-12);
        assert!((left - right).abs() < 1e-8);
    }

    #[test]
    fn deep_tail_is_finite() {
        let m = mills(-40.0);
        // φ(x)/Φ(x) ~ -x for large negative x
        assert!((m - 40.0).abs() / 40.0 < 1e-3);
        assert!(log_cdf(-40.0).is_finite());
        assert!(log_cdf(-40.0) < -800.0);
    }
}
