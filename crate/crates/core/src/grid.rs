//! Evaluation grids on `[0, 1]`, trapezoidal quadrature and interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<f64>,
}

impl Grid {
    /// `size` equispaced points from 0 to 1.
    pub fn uniform(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidInput(format!("grid needs at least 2 points, got {size}")));
        }
        let last = (size - 1) as f64;
        Ok(Grid { points: (0..size).map(|i| i as f64 / last).collect() })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput("grid needs at least 2 points".into()));
        }
        if points[0] != 0.0 || *points.last().unwrap() != 1.0 {
            return Err(Error::InvalidInput("grid must start at 0 and end at 1".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("grid must be strictly increasing".into()));
        }
        Ok(Grid { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Trapezoidal quadrature weights.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let p = &self.points;
        let g = p.len();
        (0..g)
            .map(|i| {
                let left = if i > 0 { p[i] - p[i - 1] } else { 0.0 };
                let right = if i + 1 < g { p[i + 1] - p[i] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect()
    }

    /// `int f` by the trapezoidal rule for values sampled on the grid.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.trapezoid_weights().iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Bracketing cell of `t`: index `i` and fraction `f` with `t = (1-f) p_i + f p_{i+1}`.
    /// Points outside the grid clamp to the ends.
    #[inline]
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let p = &self.points;
        let g = p.len();
        if t <= p[0] {
            return (0, 0.0);
        }
        if t >= p[g - 1] {
            return (g - 2, 1.0);
        }
        let j = p.partition_point(|&x| x <= t);
        let i = j - 1;
        (i, (t - p[i]) / (p[i + 1] - p[i]))
    }

    /// Linear interpolation of grid values at `t`.
    #[inline]
    pub fn interpolate(&self, values: &[f64], t: f64) -> f64 {
        let (i, f) = self.locate(t);
        values[i] * (1.0 - f) + values[i + 1] * f
    }

    /// Bilinear interpolation of a row-major `G x G` surface at `(s, t)`.
    #[inline]
    pub fn interpolate_surface(&self, values: &[f64], s: f64, t: f64) -> f64 {
        let g = self.len();
        let (i, fs) = self.locate(s);
        let (j, ft) = self.locate(t);
        let v00 = values[i * g + j];
        let v01 = values[i * g + j + 1];
        let v10 = values[(i + 1) * g + j];
        let v11 = values[(i + 1) * g + j + 1];
        (1.0 - fs) * ((1.0 - ft) * v00 + ft * v01) + fs * ((1.0 - ft) * v10 + ft * v11)
    }
}

/// Replace invalid entries of `values` by the value at the nearest valid index
/// (ties go to the lower index). Returns `None` when nothing is valid.
pub(crate) fn fill_nearest_1d(values: &mut [f64], valid: &[bool]) -> Option<()> {
    let idx: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return None;
    }
    for i in 0..values.len() {
        if valid[i] {
            continue;
        }
        let pos = idx.partition_point(|&v| v < i);
        let best = match (pos.checked_sub(1).map(|p| idx[p]), idx.get(pos).copied()) {
            (Some(l), Some(r)) => {
                if i - l <= r - i {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => unreachable!(),
        };
        values[i] = values[best];
    }
    Some(())
}

/// Two-dimensional version of [`fill_nearest_1d`] on a row-major `g x g` lattice,
/// by Euclidean index distance with ties broken in row-major order.
pub(crate) fn fill_nearest_2d(values: &mut [f64], valid: &[bool], g: usize) -> Option<()> {
    let idx: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return None;
    }
    for k in 0..values.len() {
        if valid[k] {
            continue;
        }
        let (r, c) = ((k / g) as i64, (k % g) as i64);
        let mut best = idx[0];
        let mut best_d = i64::MAX;
        for &v in &idx {
            let (vr, vc) = ((v / g) as i64, (v % g) as i64);
            let d = (vr - r).pow(2) + (vc - c).pow(2);
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        values[k] = values[best];
    }
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_and_weights() {
        let g = Grid::uniform(101).unwrap();
        assert_eq!(g.points()[0], 0.0);
        assert_eq!(g.points()[100], 1.0);
        let w = g.trapezoid_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let v: Vec<f64> = g.points().iter().map(|t| 3.0 * t).collect();
        assert!((g.integrate(&v) - 1.5).abs() < 1e-14);
        assert!(Grid::uniform(1).is_err());
        assert!(Grid::from_points(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(Grid::from_points(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn interpolation_is_exact_for_linear() {
        let g = Grid::from_points(vec![0.0, 0.2, 0.7, 1.0]).unwrap();
        let v: Vec<f64> = g.points().iter().map(|t| 2.0 * t - 1.0).collect();
        for t in [0.0, 0.1, 0.33, 0.7, 0.99, 1.0] {
            assert!((g.interpolate(&v, t) - (2.0 * t - 1.0)).abs() < 1e-14);
        }
        let n = g.len();
        let surf: Vec<f64> = (0..n * n)
            .map(|k| g.points()[k / n] + 3.0 * g.points()[k % n])
            .collect();
        assert!((g.interpolate_surface(&surf, 0.45, 0.8) - (0.45 + 2.4)).abs() < 1e-14);
    }

    #[test]
    fn nearest_fill() {
        let mut v = vec![0.0, 5.0, 0.0, 0.0, 7.0, 0.0];
        let ok = [false, true, false, false, true, false];
        fill_nearest_1d(&mut v, &ok).unwrap();
        assert_eq!(v, vec![5.0, 5.0, 5.0, 7.0, 7.0, 7.0]);
        assert!(fill_nearest_1d(&mut v, &[false; 6]).is_none());

        let mut s = vec![1.0, 0.0, 0.0, 0.0];
        fill_nearest_2d(&mut s, &[true, false, false, false], 2).unwrap();
        assert_eq!(s, vec![1.0; 4]);
    }
}
