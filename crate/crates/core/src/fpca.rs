//! Eigen-decomposition of a covariance surface, principal scores and
//! reconstruction of individual curves.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceSurface;
use crate::data::FunctionalDataset;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::loss::Loss;
use crate::smoothing::MeanEstimate;

/// Upper bound on retained components regardless of grid size.
pub const MAX_COMPONENTS: usize = 20;

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentRule {
    /// Smallest `K` whose cumulative fraction of variance reaches the threshold.
    Fve(f64),
    /// Exactly `K` components (fewer if fewer are positive).
    Fixed(usize),
}

impl Default for ComponentRule {
    fn default() -> Self {
        ComponentRule::Fve(0.95)
    }
}

/// Eigenvalues in decreasing order and eigenfunctions sampled on the grid,
/// orthonormal in `L2[0, 1]` under trapezoidal quadrature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem {
    pub grid: Grid,
    pub values: Vec<f64>,
    /// `functions[k][g]` is the k-th eigenfunction at grid point `g`.
    pub functions: Vec<Vec<f64>>,
    /// Sum of all positive eigenvalues, retained or not.
    pub total_variance: f64,
}

impl EigenSystem {
    pub fn components(&self) -> usize {
        self.values.len()
    }

    /// k-th eigenfunction at any `t`, by linear interpolation.
    pub fn eval(&self, k: usize, t: f64) -> f64 {
        self.grid.interpolate(&self.functions[k], t)
    }

    /// Keep only the leading `k` components.
    pub fn truncated(&self, k: usize) -> EigenSystem {
        let k = k.min(self.components());
        EigenSystem {
            grid: self.grid.clone(),
            values: self.values[..k].to_vec(),
            functions: self.functions[..k].to_vec(),
            total_variance: self.total_variance,
        }
    }

    /// `L2` inner products of the retained eigenfunctions.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let w = self.grid.trapezoid_weights();
        self.functions
            .iter()
            .map(|a| {
                self.functions
                    .iter()
                    .map(|b| a.iter().zip(b).zip(&w).map(|((x, y), w)| x * y * w).sum())
                    .collect()
            })
            .collect()
    }
}

/// Per-component and cumulative share of the total positive variance.
pub fn fraction_of_variance(eigen: &EigenSystem) -> (Vec<f64>, Vec<f64>) {
    let per: Vec<f64> = eigen.values.iter().map(|v| v / eigen.total_variance).collect();
    let cum = per
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    (per, cum)
}

fn check_symmetric(c: &CovarianceSurface) -> Result<()> {
    let g = c.size();
    if c.values.len() != g * g {
        return Err(Error::Contract(format!("surface has {} values for a {g}-point grid", c.values.len())));
    }
    let scale = c.sup_norm().max(f64::MIN_POSITIVE);
    for i in 0..g {
        for j in 0..i {
            let (a, b) = (c.at(i, j), c.at(j, i));
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::Numeric("non-finite covariance value".into()));
            }
            if (a - b).abs() > 1e-10 * scale {
                return Err(Error::Contract(format!("covariance surface is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Eigen-decomposition of the integral operator with kernel `C` under
/// trapezoidal quadrature. Eigenvalues that are non-positive or below
/// `1e-12` of the largest are dropped; each eigenfunction is signed so that
/// its largest absolute value is positive.
pub fn eigen_decompose(surface: &CovarianceSurface, rule: ComponentRule) -> Result<EigenSystem> {
    check_symmetric(surface)?;
    let grid = surface.grid.clone();
    let g = grid.len();
    let w = grid.trapezoid_weights();
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let a = DMatrix::from_fn(g, g, |i, j| sw[i] * surface.at(i, j) * sw[j]);
    let eig = SymmetricEigen::try_new(a, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigen-decomposition did not converge".into()))?;

    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let top = eig.eigenvalues[order[0]];
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(top > 1e-12 * scale) {
        return Err(Error::Numeric("covariance surface has no positive eigenvalue".into()));
    }
    let positive: Vec<usize> = order.into_iter().filter(|&k| eig.eigenvalues[k] > 1e-12 * top).collect();
    let total_variance: f64 = positive.iter().map(|&k| eig.eigenvalues[k]).sum();

    let cap = MAX_COMPONENTS.min(g - 1).min(positive.len());
    let keep = match rule {
        ComponentRule::Fixed(k) => {
            if k == 0 {
                return Err(Error::InvalidInput("at least one component is required".into()));
            }
            k.min(cap)
        }
        ComponentRule::Fve(threshold) => {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(Error::InvalidInput(format!("FVE threshold must be in (0, 1], got {threshold}")));
            }
            let mut acc = 0.0;
            let mut k = cap;
            for (idx, &e) in positive.iter().enumerate().take(cap) {
                acc += eig.eigenvalues[e];
                if acc / total_variance >= threshold - 1e-12 {
                    k = idx + 1;
                    break;
                }
            }
            k
        }
    };

    let mut values = Vec::with_capacity(keep);
    let mut functions = Vec::with_capacity(keep);
    for &k in &positive[..keep] {
        let u = eig.eigenvectors.column(k);
        let mut phi: Vec<f64> = (0..g).map(|i| u[i] / sw[i]).collect();
        // earliest index of maximal magnitude decides the sign
        let mut arg = 0;
        for i in 1..g {
            if phi[i].abs() > phi[arg].abs() {
                arg = i;
            }
        }
        if phi[arg] < 0.0 {
            phi.iter_mut().for_each(|x| *x = -*x);
        }
        values.push(eig.eigenvalues[k]);
        functions.push(phi);
    }
    Ok(EigenSystem { grid, values, functions, total_variance })
}

/// Principal scores, one row per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

/// `xi_ik = (1 / m_i) sum_j psi(X_ij - mu(T_ij)) phi_k(T_ij)`.
pub fn estimate_scores(data: &FunctionalDataset, mean: &MeanEstimate, eigen: &EigenSystem, loss: &Loss) -> Result<ScoreMatrix> {
    loss.validate()?;
    let k = eigen.components();
    let mut ids = Vec::with_capacity(data.n());
    let mut scores = Vec::with_capacity(data.n());
    for s in data.subjects() {
        let m = s.len() as f64;
        let mut row = vec![0.0; k];
        for (t, x) in s.iter() {
            let r = loss.psi(x - mean.eval(t));
            for (c, acc) in row.iter_mut().enumerate() {
                *acc += r * eigen.eval(c, t);
            }
        }
        row.iter_mut().for_each(|v| *v /= m);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score for subject {}", s.id)));
        }
        ids.push(s.id.clone());
        scores.push(row);
    }
    Ok(ScoreMatrix { ids, scores })
}

/// Reconstructed curve values and how many needed the inverse-clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub clamped: usize,
}

/// `mu(t) + psi^{-1}(sum_k xi_k phi_k(t))` at the given times, using the
/// leading `scores.len()` components.
pub fn reconstruct(mean: &MeanEstimate, eigen: &EigenSystem, scores: &[f64], loss: &Loss, times: &[f64]) -> Result<Reconstruction> {
    loss.validate()?;
    if scores.len() > eigen.components() {
        return Err(Error::InvalidInput(format!(
            "{} scores but only {} components",
            scores.len(),
            eigen.components()
        )));
    }
    let mut values = Vec::with_capacity(times.len());
    let mut clamped = 0;
    for &t in times {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("time {t} outside [0, 1]")));
        }
        let y: f64 = scores.iter().enumerate().map(|(k, xi)| xi * eigen.eval(k, t)).sum();
        let inv = loss.psi_inverse(y);
        clamped += inv.clamped as usize;
        values.push(mean.eval(t) + inv.value);
    }
    Ok(Reconstruction { times: times.to_vec(), values, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Subject;
    use std::f64::consts::PI;

    fn surface_from(grid: &Grid, f: impl Fn(f64, f64) -> f64) -> CovarianceSurface {
        let p = grid.points();
        let g = p.len();
        let values = (0..g * g).map(|k| f(p[k / g], p[k % g])).collect();
        CovarianceSurface {
            grid: grid.clone(),
            values,
            bandwidth: 0.1,
            loss: Loss::SQUARE,
            kernel: Default::default(),
            filled: vec![false; g * g],
        }
    }

    fn phi(k: usize, t: f64) -> f64 {
        2f64.sqrt() * (k as f64 * PI * t).sin()
    }

    fn l2(grid: &Grid, a: &[f64], b: impl Fn(f64) -> f64) -> f64 {
        let d: Vec<f64> = grid.points().iter().zip(a).map(|(t, x)| (x - b(*t)).powi(2)).collect();
        grid.integrate(&d).sqrt()
    }

    #[test]
    fn rank_one_surface() {
        let grid = Grid::uniform(101).unwrap();
        let c = surface_from(&grid, |s, t| 2.0 * phi(1, s) * phi(1, t));
        let e = eigen_decompose(&c, ComponentRule::default()).unwrap();
        assert_eq!(e.components(), 1);
        assert!((e.values[0] - 2.0).abs() < 1e-3);
        assert!(l2(&grid, &e.functions[0], |t| phi(1, t)) < 1e-2);
        let (per, cum) = fraction_of_variance(&e);
        assert!((per[0] - 1.0).abs() < 1e-9 && (cum[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn three_components_orthonormal_and_stable_under_refinement() {
        let cov = |s: f64, t: f64| (1..=3).map(|k| (k * k) as f64 * phi(k, s) * phi(k, t)).sum::<f64>();
        let coarse = Grid::uniform(101).unwrap();
        let fine = Grid::uniform(201).unwrap();
        let a = eigen_decompose(&surface_from(&coarse, cov), ComponentRule::Fixed(3)).unwrap();
        let b = eigen_decompose(&surface_from(&fine, cov), ComponentRule::Fixed(3)).unwrap();
        for (k, expected) in [9.0, 4.0, 1.0].iter().enumerate() {
            assert!((a.values[k] - expected).abs() < 1e-2 * expected);
            assert!((a.values[k] - b.values[k]).abs() < 5e-3 * expected);
        }
        let gram = a.gram();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gram[i][j] - target).abs() < 1e-10);
            }
        }
        for k in 0..3 {
            // sin(2 pi t) has two extremes of equal size, so compare up to sign
            let sign = if a.eval(k, 0.3) * b.eval(k, 0.3) < 0.0 { -1.0 } else { 1.0 };
            let diff: Vec<f64> = fine.points().iter().map(|&t| a.eval(k, t) - sign * b.eval(k, t)).collect();
            assert!(fine.integrate(&diff.iter().map(|d| d * d).collect::<Vec<_>>()).sqrt() < 1e-2);
        }
        // 9 / 14 < 0.95 <= 13 / 14 is false, 14 / 14 reached at three components
        let fve = eigen_decompose(&surface_from(&coarse, cov), ComponentRule::Fve(0.95)).unwrap();
        assert_eq!(fve.components(), 3);
        let fve = eigen_decompose(&surface_from(&coarse, cov), ComponentRule::Fve(0.9)).unwrap();
        assert_eq!(fve.components(), 2);
    }

    #[test]
    fn sign_convention() {
        let grid = Grid::uniform(51).unwrap();
        let c = surface_from(&grid, |s, t| phi(2, s) * phi(2, t));
        let e = eigen_decompose(&c, ComponentRule::Fixed(1)).unwrap();
        let f = &e.functions[0];
        let arg = (0..f.len()).fold(0, |a, i| if f[i].abs() > f[a].abs() { i } else { a });
        assert!(f[arg] > 0.0);
        let again = eigen_decompose(&c, ComponentRule::Fixed(1)).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn invalid_surfaces() {
        let grid = Grid::uniform(11).unwrap();
        let asym = surface_from(&grid, |s, t| s * t + 0.1 * s);
        assert!(matches!(eigen_decompose(&asym, ComponentRule::default()), Err(Error::Contract(_))));
        let zero = surface_from(&grid, |_, _| 0.0);
        assert!(matches!(eigen_decompose(&zero, ComponentRule::default()), Err(Error::Numeric(_))));
        let neg = surface_from(&grid, |s, t| -s * t);
        assert!(eigen_decompose(&neg, ComponentRule::default()).is_err());
    }

    fn toy_system() -> (Grid, MeanEstimate, EigenSystem) {
        let grid = Grid::uniform(101).unwrap();
        let c = surface_from(&grid, |s, t| 4.0 * phi(1, s) * phi(1, t) + phi(2, s) * phi(2, t));
        let e = eigen_decompose(&c, ComponentRule::Fixed(2)).unwrap();
        (grid.clone(), MeanEstimate::constant(grid, 0.0, Loss::SQUARE), e)
    }

    #[test]
    fn scores_of_a_dense_curve() {
        let (grid, mean, e) = toy_system();
        // square loss doubles residuals; dense uniform sampling approximates the integral
        let times: Vec<f64> = (0..1000).map(|j| (j as f64 + 0.5) / 1000.0).collect();
        let values = times.iter().map(|&t| 1.5 * phi(1, t) - 0.5 * phi(2, t)).collect();
        let d = FunctionalDataset::new(vec![Subject::new("a", times, values)]).unwrap();
        let s = estimate_scores(&d, &mean, &e, &Loss::SQUARE).unwrap();
        assert!((s.scores[0][0] - 3.0).abs() < 1e-2);
        let sign = e.eval(1, 0.25).signum();
        assert!((sign * s.scores[0][1] + 1.0).abs() < 1e-2);
        let r = reconstruct(&mean, &e, &s.scores[0], &Loss::SQUARE, grid.points()).unwrap();
        assert_eq!(r.clamped, 0);
        for (t, v) in grid.points().iter().zip(&r.values) {
            assert!((v - (1.5 * phi(1, *t) - 0.5 * phi(2, *t))).abs() < 2e-2);
        }
    }

    #[test]
    fn scores_at_the_mean_vanish() {
        let (_, _, e) = toy_system();
        let mean = MeanEstimate::constant(e.grid.clone(), 2.0, Loss::LOG_COSH);
        let d = FunctionalDataset::new(vec![Subject::new("a", vec![0.1, 0.4], vec![2.0, 2.0])]).unwrap();
        let s = estimate_scores(&d, &mean, &e, &Loss::LOG_COSH).unwrap();
        assert!(s.scores[0].iter().all(|&v| v == 0.0));
        let r = reconstruct(&mean, &e, &s.scores[0], &Loss::LOG_COSH, &[0.0, 0.5]).unwrap();
        assert_eq!(r.values, vec![2.0, 2.0]);
    }

    #[test]
    fn bounded_inverse_clamps() {
        let (_, mean, e) = toy_system();
        let r = reconstruct(&mean, &e, &[10.0, 0.0], &Loss::LOG_COSH, &[0.5]).unwrap();
        assert_eq!(r.clamped, 1);
        assert!(r.values[0].is_finite());
        assert!(reconstruct(&mean, &e, &[1.0, 1.0, 1.0], &Loss::LOG_COSH, &[0.5]).is_err());
    }
}
