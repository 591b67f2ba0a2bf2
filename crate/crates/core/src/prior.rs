//! Priors over readout parameters and the observation-noise variance.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Prior on each readout parameter independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightPrior {
    /// `N(0, std^2)`.
    Normal { std: f64 },
    /// `Unif(low, high)`.
    Uniform { low: f64, high: f64 },
    /// Half-Cauchy local and global scales; only valid for the sparse
    /// linear readout.
    Horseshoe,
}

impl WeightPrior {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Self::Normal { std } if !(std > 0.0 && std.is_finite()) => Err(format!("normal prior std {std}")),
            Self::Uniform { low, high } if !(low < high && low.is_finite() && high.is_finite()) => {
                Err(format!("uniform prior bounds ({low}, {high})"))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Normal { std } => format!("N(0,{std})"),
            Self::Uniform { low, high } => format!("Unif({low},{high})"),
            Self::Horseshoe => "horseshoe".into(),
        }
    }
}

/// `Unif(0, upper)` on the noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePrior {
    pub upper: f64,
}

impl Default for NoisePrior {
    fn default() -> Self {
        Self { upper: 10.0 }
    }
}

#[inline]
pub fn normal_log_density(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (x - mean).powi(2) / var
}

/// `log(2 / (pi (1 + x^2)))`, the standard half-Cauchy on `x > 0`.
#[inline]
pub fn half_cauchy_log_density(x: f64) -> f64 {
    (2.0 / PI).ln() - x.mul_add(x, 1.0).ln()
}

#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(u))` without overflow.
#[inline]
pub fn log_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

#[inline]
pub fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Maps `u` on the real line to `(low, high)`, returning the value and
/// `log |dx/du|`.
#[inline]
pub fn logit_to_interval(u: f64, low: f64, high: f64) -> (f64, f64) {
    let s = sigmoid(u);
    let log_jac = (high - low).ln() + log_sigmoid(u) + log_sigmoid(-u);
    (low + (high - low) * s, log_jac)
}

#[inline]
pub fn interval_to_logit(x: f64, low: f64, high: f64) -> f64 {
    let s = (x - low) / (high - low);
    (s / (1.0 - s)).ln()
}
