//! Compactly supported smoothing kernels on `[-1, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    /// `(70/81) (1 - |u|^3)^3`
    #[default]
    Tricube,
    /// `(3/4) (1 - u^2)`
    Epanechnikov,
}

impl Kernel {
    #[inline]
    pub fn eval(self, u: f64) -> f64 {
        let a = u.abs();
        if a > 1.0 {
            return 0.0;
        }
        match self {
            Kernel::Tricube => {
                let c = 1.0 - a * a * a;
                70.0 / 81.0 * c * c * c
            }
            Kernel::Epanechnikov => 0.75 * (1.0 - a * a),
        }
    }

    /// `K_h(x) = K(x / h) / h`.
    #[inline]
    pub fn scaled(self, x: f64, h: f64) -> f64 {
        self.eval(x / h) / h
    }

    /// `int K(u)^2 du`.
    pub fn roughness(self) -> f64 {
        match self {
            Kernel::Tricube => 175.0 / 247.0,
            Kernel::Epanechnikov => 0.6,
        }
    }

    /// Polynomial degree of each smooth piece, used to size exact quadrature.
    pub(crate) fn piece_degree(self) -> usize {
        match self {
            Kernel::Tricube => 9,
            Kernel::Epanechnikov => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Tricube => "tricube",
            Kernel::Epanechnikov => "epanechnikov",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tricube" => Ok(Kernel::Tricube),
            "epanechnikov" => Ok(Kernel::Epanechnikov),
            other => Err(Error::InvalidInput(format!("unknown kernel '{other}'"))),
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Rule with `n` points, exact for polynomials of degree `2n - 1`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            // Newton on P_n from the Chebyshev-like initial guess
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d.is_finite() {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// `int_a^b f(x) dx`.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_are_densities() {
        let gl = GaussLegendre::new(10);
        for k in [Kernel::Tricube, Kernel::Epanechnikov] {
            let mass = gl.integrate(-1.0, 0.0, |u| k.eval(u)) + gl.integrate(0.0, 1.0, |u| k.eval(u));
            assert!((mass - 1.0).abs() < 1e-10, "{k}: {mass}");
            let rough = gl.integrate(-1.0, 0.0, |u| k.eval(u).powi(2)) + gl.integrate(0.0, 1.0, |u| k.eval(u).powi(2));
            assert!((rough - k.roughness()).abs() < 1e-10);
            for u in [0.0, 0.3, 0.77, 1.0, 1.5] {
                assert_eq!(k.eval(u), k.eval(-u));
                assert!(k.eval(u) >= 0.0);
            }
            assert_eq!(k.eval(1.0001), 0.0);
        }
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let gl = GaussLegendre::new(6);
        let v = gl.integrate(0.0, 2.0, |x| x.powi(11) - 3.0 * x.powi(4));
        let exact = 2f64.powi(12) / 12.0 - 3.0 * 2f64.powi(5) / 5.0;
        assert!((v - exact).abs() < 1e-10 * exact.abs());
        let gl1 = GaussLegendre::new(1);
        assert!((gl1.integrate(0.0, 1.0, |x| x) - 0.5).abs() < 1e-15);
    }
}
