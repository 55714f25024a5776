//! Robust loss families and their rescaling functions.
//!
//! Each family is an even loss `rho` with `psi = rho'`. The three robust
//! families have `|psi| <= 1`; the square loss is kept as the classic
//! reference (`psi(x) = 2x`).

use std::f64::consts::{FRAC_2_PI, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp margin applied by [`Loss::psi_inverse`] on families whose `psi`
/// has open range `(-1, 1)`.
pub const INVERSE_CLAMP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFamily {
    /// `x^2`.
    Square,
    /// Absolute loss with a quartic patch on `[-kappa, kappa]`.
    LocalSmoothAbs,
    /// `log(cosh(x))`.
    LogCosh,
    /// `(2/pi) x atan(x) - (1/pi) ln(1 + x^2)`.
    ArctanIntegral,
}

impl LossFamily {
    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Square => "square",
            LossFamily::LocalSmoothAbs => "local-smooth-abs",
            LossFamily::LogCosh => "log-cosh",
            LossFamily::ArctanIntegral => "arctan-integral",
        }
    }

    /// Whether `psi` is bounded by one in absolute value.
    pub fn is_bounded(self) -> bool {
        !matches!(self, LossFamily::Square)
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "square" | "rho0" => Ok(LossFamily::Square),
            "local-smooth-abs" | "rho1" => Ok(LossFamily::LocalSmoothAbs),
            "log-cosh" | "rho2" => Ok(LossFamily::LogCosh),
            "arctan-integral" | "rho3" => Ok(LossFamily::ArctanIntegral),
            other => Err(Error::InvalidInput(format!("unknown loss family '{other}'"))),
        }
    }
}

fn default_kappa() -> f64 {
    1.0
}

/// A loss family together with its smoothing half-width.
///
/// `kappa` only matters for [`LossFamily::LocalSmoothAbs`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Loss {
    pub family: LossFamily,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

/// Result of a generalized inverse evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inverse {
    pub value: f64,
    /// The argument fell outside the invertible range and was clamped.
    pub clamped: bool,
}

impl Loss {
    pub const SQUARE: Loss = Loss { family: LossFamily::Square, kappa: 1.0 };
    pub const LOG_COSH: Loss = Loss { family: LossFamily::LogCosh, kappa: 1.0 };
    pub const ARCTAN_INTEGRAL: Loss = Loss { family: LossFamily::ArctanIntegral, kappa: 1.0 };

    pub fn new(family: LossFamily, kappa: f64) -> Result<Self> {
        let loss = Loss { family, kappa };
        loss.validate()?;
        Ok(loss)
    }

    pub fn local_smooth_abs(kappa: f64) -> Result<Self> {
        Self::new(LossFamily::LocalSmoothAbs, kappa)
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == LossFamily::LocalSmoothAbs && !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "kappa must be positive and finite, got {}",
                self.kappa
            )));
        }
        Ok(())
    }

    /// `rho(x)`. Non-finite input propagates; use [`Loss::try_rho`] to reject it.
    #[inline]
    pub fn rho(&self, x: f64) -> f64 {
        match self.family {
            LossFamily::Square => x * x,
            LossFamily::LocalSmoothAbs => {
                let k = self.kappa;
                let ax = x.abs();
                if ax > k {
                    ax
                } else {
                    let x2 = x * x;
                    let k2 = k * k;
                    (-x2 * x2 + 6.0 * k2 * x2 + 3.0 * k2 * k2) / (8.0 * k2 * k)
                }
            }
            LossFamily::LogCosh => {
                // log cosh x = |x| + log1p(exp(-2|x|)) - log 2, stable for large |x|
                let ax = x.abs();
                ax + (-2.0 * ax).exp().ln_1p() - std::f64::consts::LN_2
            }
            LossFamily::ArctanIntegral => FRAC_2_PI * x * x.atan() - (x * x).ln_1p() / PI,
        }
    }

    /// `psi(x) = rho'(x)`.
    #[inline]
    pub fn psi(&self, x: f64) -> f64 {
        match self.family {
            LossFamily::Square => 2.0 * x,
            LossFamily::LocalSmoothAbs => {
                let k = self.kappa;
                if x > k {
                    1.0
                } else if x < -k {
                    -1.0
                } else {
                    (-x * x * x + 3.0 * k * k * x) / (2.0 * k * k * k)
                }
            }
            LossFamily::LogCosh => x.tanh(),
            LossFamily::ArctanIntegral => FRAC_2_PI * x.atan(),
        }
    }

    /// `psi'(x)`.
    #[inline]
    pub fn psi_prime(&self, x: f64) -> f64 {
        match self.family {
            LossFamily::Square => 2.0,
            LossFamily::LocalSmoothAbs => {
                let k = self.kappa;
                if x.abs() > k {
                    0.0
                } else {
                    3.0 * (k * k - x * x) / (2.0 * k * k * k)
                }
            }
            LossFamily::LogCosh => {
                let c = x.cosh();
                if c.is_infinite() {
                    0.0
                } else {
                    1.0 / (c * c)
                }
            }
            LossFamily::ArctanIntegral => FRAC_2_PI / (1.0 + x * x),
        }
    }

    pub fn try_rho(&self, x: f64) -> Result<f64> {
        check_finite("rho", x)?;
        Ok(self.rho(x))
    }

    pub fn try_psi(&self, x: f64) -> Result<f64> {
        check_finite("psi", x)?;
        Ok(self.psi(x))
    }

    pub fn try_psi_prime(&self, x: f64) -> Result<f64> {
        check_finite("psi'", x)?;
        Ok(self.psi_prime(x))
    }

    /// Generalized inverse `inf { s : psi(s) >= y }`.
    ///
    /// Bounded families clamp `y` into the attainable range first; the
    /// returned flag records whether that happened.
    pub fn psi_inverse(&self, y: f64) -> Inverse {
        match self.family {
            LossFamily::Square => Inverse { value: y / 2.0, clamped: false },
            LossFamily::LogCosh | LossFamily::ArctanIntegral => {
                let lim = 1.0 - INVERSE_CLAMP_EPS;
                let clamped = !(y.abs() <= lim);
                let yc = if y.is_nan() { 0.0 } else { y.clamp(-lim, lim) };
                let value = match self.family {
                    LossFamily::LogCosh => yc.atanh(),
                    _ => (PI * yc / 2.0).tan(),
                };
                Inverse { value, clamped }
            }
            LossFamily::LocalSmoothAbs => {
                let clamped = !(y.abs() <= 1.0);
                let yc = if y.is_nan() { 0.0 } else { y.clamp(-1.0, 1.0) };
                // -u^3 + 3u = 2y on [-1, 1] has root u = 2 sin(asin(y) / 3)
                let u = if yc == 1.0 {
                    1.0
                } else if yc == -1.0 {
                    -1.0
                } else {
                    2.0 * (yc.asin() / 3.0).sin()
                };
                Inverse { value: self.kappa * u, clamped }
            }
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            LossFamily::LocalSmoothAbs => write!(f, "{}(kappa={})", self.family, self.kappa),
            _ => write!(f, "{}", self.family),
        }
    }
}

fn check_finite(what: &'static str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain { what, value: x })
    }
}
