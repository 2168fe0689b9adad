//! Continuous μ-law companding.
//!
//! The generator and the random window discriminators both live in the
//! μ-law domain; spectrograms are taken after expanding back to linear
//! amplitude.

use crate::error::{Error, Result};

/// Companding constant.
pub const MU: f64 = 255.0;

fn check_domain(samples: &[f64]) -> Result<()> {
    match samples
        .iter()
        .position(|v| !v.is_finite() || v.abs() > 1.0)
    {
        Some(index) => Err(Error::OutOfDomain {
            index,
            value: samples[index],
        }),
        None => Ok(()),
    }
}

/// `sign(x) * ln(1 + mu|x|) / ln(1 + mu)`.
#[inline]
pub fn encode_sample(x: f64, mu: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p()
}

/// Derivative of [`encode_sample`] with respect to `x`.
#[inline]
pub fn encode_derivative(x: f64, mu: f64) -> f64 {
    mu / ((1.0 + mu * x.abs()) * mu.ln_1p())
}

/// `sign(t) / mu * ((1 + mu)^|t| - 1)`.
#[inline]
pub fn decode_sample(t: f64, mu: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    t.signum() / mu * ((t.abs() * mu.ln_1p()).exp_m1())
}

/// Derivative of [`decode_sample`] with respect to `t`.
#[inline]
pub fn decode_derivative(t: f64, mu: f64) -> f64 {
    let log_base = mu.ln_1p();
    log_base / mu * (t.abs() * log_base).exp()
}

pub fn mu_law_encode(x: &[f64], mu: f64) -> Result<Vec<f64>> {
    check_domain(x)?;
    Ok(x.iter().map(|&v| encode_sample(v, mu)).collect())
}

pub fn mu_law_decode(t: &[f64], mu: f64) -> Result<Vec<f64>> {
    check_domain(t)?;
    Ok(t.iter().map(|&v| decode_sample(v, mu)).collect())
}
