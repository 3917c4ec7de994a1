//! Maximum-entropy activations for the three canonical data ranges.
//!
//! | range      | prior                 | λ(α)                          |
//! |------------|-----------------------|-------------------------------|
//! | ℝ          | Gaussian              | α                             |
//! | [0, ∞)     | truncated Gaussian    | α + N(α)/Φ(α)                 |
//! | [0, 1]     | uniform (trunc. exp.) | e^α/(e^α − 1) − 1/α           |
//!
//! λ is the conditional mean of a coordinate under the prior tilted by
//! `e^{αx}`; it is strictly increasing, so each kind also has an inverse.

use core::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::roots::invert_increasing;

/// 1/√(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Below this argument the truncated-Gaussian activation switches to the
/// continued fraction of the Mills ratio.
const TG_TAIL: f64 = -3.0;

/// Terms kept in the Mills-ratio continued fraction (full precision for x ≥ 3).
const TG_CF_TERMS: usize = 60;

/// Below this |α| the truncated-exponential activation uses its Taylor series.
const TED_SERIES: f64 = 0.1;

/// Which canonical input range (and so which prior and activation) a layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaxEntKind {
    /// Range ℝ, Gaussian prior, identity activation.
    Linear,
    /// Range [0, ∞), truncated Gaussian prior.
    TruncGauss,
    /// Range [0, 1], uniform prior (truncated exponential family).
    TruncExpon,
}

impl MaxEntKind {
    pub const ALL: [MaxEntKind; 3] = [Self::Linear, Self::TruncGauss, Self::TruncExpon];

    /// Stable one-byte tag used by the model file.
    pub fn tag(self) -> u8 {
        match self {
            Self::Linear => 0,
            Self::TruncGauss => 1,
            Self::TruncExpon => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Linear),
            1 => Some(Self::TruncGauss),
            2 => Some(Self::TruncExpon),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::TruncGauss => "trunc_gauss",
            Self::TruncExpon => "trunc_expon",
        }
    }

    /// Whether `y` lies strictly inside the output range of λ.
    pub fn contains(self, y: f64) -> bool {
        match self {
            Self::Linear => y.is_finite(),
            Self::TruncGauss => y > 0.0 && y.is_finite(),
            Self::TruncExpon => y > 0.0 && y < 1.0,
        }
    }

    /// λ(α).
    #[inline]
    pub fn lambda(self, alpha: f64) -> f64 {
        match self {
            Self::Linear => alpha,
            Self::TruncGauss => tg_lambda(alpha),
            Self::TruncExpon => ted_lambda(alpha),
        }
    }

    /// λ′(α), always positive.
    #[inline]
    pub fn lambda_deriv(self, alpha: f64) -> f64 {
        match self {
            Self::Linear => 1.0,
            Self::TruncGauss => tg_lambda_and_deriv(alpha).1,
            Self::TruncExpon => ted_lambda_deriv(alpha),
        }
    }

    /// `(λ(α), λ′(α))` in one pass.
    #[inline]
    pub fn lambda_and_deriv(self, alpha: f64) -> (f64, f64) {
        match self {
            Self::Linear => (alpha, 1.0),
            Self::TruncGauss => tg_lambda_and_deriv(alpha),
            Self::TruncExpon => (ted_lambda(alpha), ted_lambda_deriv(alpha)),
        }
    }

    /// α with λ(α) = y.
    pub fn lambda_inverse(self, y: f64) -> Result<f64> {
        if !self.contains(y) {
            return Err(Error::OutOfRange { value: y });
        }
        match self {
            Self::Linear => Ok(y),
            _ => invert_increasing(|a| self.lambda_and_deriv(a), y),
        }
    }
}

/// Standard normal density.
#[inline]
pub fn gauss_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Standard normal distribution function, accurate in relative terms deep
/// into the lower tail.
#[inline]
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn tg_lambda(alpha: f64) -> f64 {
    if alpha >= TG_TAIL {
        alpha + gauss_pdf(alpha) / gauss_cdf(alpha)
    } else {
        tg_tail(-alpha).0
    }
}

fn tg_lambda_and_deriv(alpha: f64) -> (f64, f64) {
    if alpha >= TG_TAIL {
        let r = gauss_pdf(alpha) / gauss_cdf(alpha);
        let lam = alpha + r;
        (lam, 1.0 - r * lam)
    } else {
        tg_tail(-alpha)
    }
}

/// Lower tail of the truncated-Gaussian activation, `x = −α ≥ 3`.
///
/// With `λ = 1/t`, `t = x + c`, `c = 2/(x + 3/(x + 4/(x + …)))`, the value
/// needs no cancellation and `λ′ = (c·x + c² − 1)/t²` stays accurate where
/// `1 − r·λ` would not.
fn tg_tail(x: f64) -> (f64, f64) {
    let mut s = x;
    for k in (3..=TG_CF_TERMS).rev() {
        s = x + k as f64 / s;
    }
    let c = 2.0 / s;
    let t = x + c;
    let lam = 1.0 / t;
    let deriv = (c * x + c * c - 1.0) / (t * t);
    (lam, deriv)
}

fn ted_lambda(alpha: f64) -> f64 {
    if alpha.abs() < TED_SERIES {
        let a2 = alpha * alpha;
        0.5 + alpha
            * (1.0 / 12.0
                + a2 * (-1.0 / 720.0
                    + a2 * (1.0 / 30240.0 + a2 * (-1.0 / 1_209_600.0 + a2 / 47_900_160.0))))
    } else {
        -1.0 / libm::expm1(-alpha) - 1.0 / alpha
    }
}

fn ted_lambda_deriv(alpha: f64) -> f64 {
    if alpha.abs() < TED_SERIES {
        let a2 = alpha * alpha;
        1.0 / 12.0
            + a2 * (-1.0 / 240.0 + a2 * (1.0 / 6048.0 + a2 * (-1.0 / 172_800.0 + a2 / 5_322_240.0)))
    } else {
        let s = libm::sinh(0.5 * alpha);
        1.0 / (alpha * alpha) - 1.0 / (4.0 * s * s)
    }
}
