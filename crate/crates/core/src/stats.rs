//! Standard-normal helpers shared across modules.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use std::sync::LazyLock;

static STD_NORMAL: LazyLock<Normal> = LazyLock::new(|| Normal::new(0.0, 1.0).unwrap());

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    STD_NORMAL.pdf(x)
}

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    STD_NORMAL.cdf(x)
}

/// Standard normal quantile function.
pub fn norm_quantile(p: f64) -> f64 {
    STD_NORMAL.inverse_cdf(p)
}

/// Clamps a p-value away from 0 and 1 so quantile transforms stay finite.
pub fn clamp_p(p: f64) -> f64 {
    p.clamp(1e-15, 1.0 - 1e-15)
}
