//! Robust covariance surface.
//!
//! Raw covariances are products of rescaled residuals `psi(X - mu(T))` at two
//! distinct times of the same subject. They are smoothed with a local-linear
//! surface fit whose design moments are replaced by their expectations under a
//! uniform design, which gives the closed form
//! `C(s, t) = w1 R00 + w2 R10 + w3 R01`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{assign_folds, fold_split, FunctionalDataset};
use crate::error::{Error, Result};
use crate::grid::{fill_nearest_2d, Grid};
use crate::kernel::{GaussLegendre, Kernel};
use crate::loss::Loss;
use crate::smoothing::{select_min, CvSelection, MeanEstimate, SmootherOptions};

/// Rescaled residuals of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaledSubject {
    pub id: String,
    pub times: Vec<f64>,
    pub psi: Vec<f64>,
}

/// One raw covariance observation `psi_{i,j1} * psi_{i,j2}` for `j1 != j2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub subject: usize,
    pub t1: f64,
    pub t2: f64,
    pub value: f64,
}

/// Raw covariances, stored per subject as the rescaled residuals they are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCovariances {
    pub subjects: Vec<RescaledSubject>,
    pub loss: Loss,
}

impl RawCovariances {
    /// All ordered pairs `j1 != j2` of every subject.
    pub fn records(&self) -> Vec<RawRecord> {
        let mut out = Vec::with_capacity(self.len());
        for (i, s) in self.subjects.iter().enumerate() {
            for j1 in 0..s.times.len() {
                for j2 in 0..s.times.len() {
                    if j1 != j2 {
                        out.push(RawRecord { subject: i, t1: s.times[j1], t2: s.times[j2], value: s.psi[j1] * s.psi[j2] });
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.subjects.iter().map(|s| s.times.len() * s.times.len().saturating_sub(1)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of subjects with at least two observations.
    pub fn contributing_subjects(&self) -> usize {
        self.subjects.iter().filter(|s| s.times.len() >= 2).count()
    }

    /// `v_i = 1 / (n m_i (m_i - 1))` with `n` the number of contributing subjects;
    /// zero for subjects with a single observation.
    pub fn subject_weights(&self) -> Vec<f64> {
        let n = self.contributing_subjects() as f64;
        self.subjects
            .iter()
            .map(|s| {
                let m = s.times.len() as f64;
                if s.times.len() >= 2 {
                    1.0 / (n * m * (m - 1.0))
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> RawCovariances {
        RawCovariances { subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(), loss: self.loss }
    }
}

/// Rescaled residuals `psi(X_ij - mu(T_ij))` for every observation.
pub fn raw_covariances(data: &FunctionalDataset, mean: &MeanEstimate, loss: &Loss) -> Result<RawCovariances> {
    loss.validate()?;
    let mut subjects = Vec::with_capacity(data.n());
    for s in data.subjects() {
        let psi: Vec<f64> = s.iter().map(|(t, x)| loss.psi(x - mean.eval(t))).collect();
        if let Some(bad) = psi.iter().find(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("non-finite rescaled residual {bad} for subject {}", s.id)));
        }
        subjects.push(RescaledSubject { id: s.id.clone(), times: s.times.clone(), psi });
    }
    Ok(RawCovariances { subjects, loss: *loss })
}

/// How the expected design moments are computed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentMode {
    /// Exact quadrature under a uniform design.
    #[default]
    Analytic,
    /// Averages over `samples` simulated uniform times.
    MonteCarlo { samples: usize, seed: u64 },
}

/// One-dimensional factor `E[(T - s)^a K_h(T - s)]` for `a = 0, 1, 2`, with
/// Monte-Carlo standard errors when simulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentFactor {
    pub value: [f64; 3],
    pub std_error: [f64; 3],
}

/// Expected design moments and closed-form weights at one surface node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEntries {
    /// `S00, S10, S01, S20, S02, S11`.
    pub s: [f64; 6],
    /// `W1, W2, W3`.
    pub big_w: [f64; 3],
    /// `w1, w2, w3`.
    pub w: [f64; 3],
}

impl MomentEntries {
    fn from_factors(fs: &[f64; 3], ft: &[f64; 3]) -> Self {
        let s00 = fs[0] * ft[0];
        let s10 = fs[1] * ft[0];
        let s01 = fs[0] * ft[1];
        let s20 = fs[2] * ft[0];
        let s02 = fs[0] * ft[2];
        let s11 = fs[1] * ft[1];
        let w1 = s20 * s02 - s11 * s11;
        let w2 = -(s10 * s02 - s01 * s11);
        let w3 = s10 * s11 - s01 * s20;
        let denom = w1 * s00 + w2 * s10 + w3 * s01;
        MomentEntries { s: [s00, s10, s01, s20, s02, s11], big_w: [w1, w2, w3], w: [w1 / denom, w2 / denom, w3 / denom] }
    }
}

fn analytic_factor(s: f64, h: f64, kernel: Kernel, rule: &GaussLegendre) -> [f64; 3] {
    let mut out = [0.0; 3];
    // split at s where |u - s| has its kink; each piece is polynomial
    let pieces = [((s - h).max(0.0), s.clamp(0.0, 1.0)), (s.clamp(0.0, 1.0), (s + h).min(1.0))];
    for (a, b) in pieces {
        if b <= a {
            continue;
        }
        for (p, o) in out.iter_mut().enumerate() {
            *o += rule.integrate(a, b, |u| (u - s).powi(p as i32) * kernel.scaled(u - s, h));
        }
    }
    out
}

fn mc_factor(s: f64, h: f64, kernel: Kernel, draws: &[f64]) -> MomentFactor {
    let n = draws.len() as f64;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for &u in draws {
        let d = u - s;
        let k = kernel.scaled(d, h);
        let terms = [k, d * k, d * d * k];
        for p in 0..3 {
            sum[p] += terms[p];
            sq[p] += terms[p] * terms[p];
        }
    }
    let mut value = [0.0; 3];
    let mut std_error = [0.0; 3];
    for p in 0..3 {
        value[p] = sum[p] / n;
        let var = (sq[p] / n - value[p] * value[p]).max(0.0) * n / (n - 1.0);
        std_error[p] = (var / n).sqrt();
    }
    MomentFactor { value, std_error }
}

fn quadrature_rule(kernel: Kernel) -> GaussLegendre {
    // exact for (u - s)^2 times a polynomial kernel piece
    GaussLegendre::new((kernel.piece_degree() + 2) / 2 + 1)
}

fn mc_draws(samples: usize, seed: u64) -> Result<Vec<f64>> {
    if samples < 2 {
        return Err(Error::InvalidInput(format!("Monte-Carlo moments need at least 2 samples, got {samples}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..samples).map(|_| rng.random::<f64>()).collect())
}

/// One-dimensional moment factor at `s`.
pub fn moment_factor(s: f64, h: f64, kernel: Kernel, mode: MomentMode) -> Result<MomentFactor> {
    check_bandwidth(h)?;
    match mode {
        MomentMode::Analytic => {
            let value = analytic_factor(s, h, kernel, &quadrature_rule(kernel));
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("moment quadrature failed at s = {s}")));
            }
            Ok(MomentFactor { value, std_error: [0.0; 3] })
        }
        MomentMode::MonteCarlo { samples, seed } => Ok(mc_factor(s, h, kernel, &mc_draws(samples, seed)?)),
    }
}

/// Expected design moments `S_ab(s, t)` and closed-form weights at one node.
pub fn design_moments(s: f64, t: f64, h: f64, kernel: Kernel, mode: MomentMode) -> Result<MomentEntries> {
    check_bandwidth(h)?;
    let (fs, ft) = match mode {
        MomentMode::Analytic => {
            let rule = quadrature_rule(kernel);
            (analytic_factor(s, h, kernel, &rule), analytic_factor(t, h, kernel, &rule))
        }
        MomentMode::MonteCarlo { samples, seed } => {
            let draws = mc_draws(samples, seed)?;
            (mc_factor(s, h, kernel, &draws).value, mc_factor(t, h, kernel, &draws).value)
        }
    };
    Ok(MomentEntries::from_factors(&fs, &ft))
}

/// Design moments for every node of a grid lattice. Since the moments factor
/// into a product of one-dimensional terms only the per-point factors are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMoments {
    pub grid: Grid,
    pub bandwidth: f64,
    pub kernel: Kernel,
    pub mode: MomentMode,
    factors: Vec<[f64; 3]>,
}

impl DesignMoments {
    pub fn on_grid(grid: &Grid, h: f64, kernel: Kernel, mode: MomentMode) -> Result<Self> {
        check_bandwidth(h)?;
        let factors = match mode {
            MomentMode::Analytic => {
                let rule = quadrature_rule(kernel);
                grid.points().iter().map(|&s| analytic_factor(s, h, kernel, &rule)).collect::<Vec<_>>()
            }
            MomentMode::MonteCarlo { samples, seed } => {
                let draws = mc_draws(samples, seed)?;
                grid.points().iter().map(|&s| mc_factor(s, h, kernel, &draws).value).collect()
            }
        };
        if factors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite design moment".into()));
        }
        Ok(DesignMoments { grid: grid.clone(), bandwidth: h, kernel, mode, factors })
    }

    /// Entries at lattice node `(i, j)`.
    pub fn entries(&self, i: usize, j: usize) -> MomentEntries {
        MomentEntries::from_factors(&self.factors[i], &self.factors[j])
    }
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")))
    }
}

/// Symmetric robust covariance estimate on a `G x G` lattice (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSurface {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    pub loss: Loss,
    pub kernel: Kernel,
    /// Nodes without any raw pair in their window, filled from the nearest valid node.
    pub filled: Vec<bool>,
}

impl CovarianceSurface {
    pub fn size(&self) -> usize {
        self.grid.len()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    /// Bilinear interpolation at any `(s, t)`.
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        self.grid.interpolate_surface(&self.values, s, t)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let g = self.size();
        DMatrix::from_row_slice(g, g, &self.values)
    }

    pub fn from_matrix(grid: Grid, m: &DMatrix<f64>, loss: Loss) -> Result<Self> {
        let g = grid.len();
        if m.nrows() != g || m.ncols() != g {
            return Err(Error::InvalidInput(format!("matrix is {}x{}, grid has {g} points", m.nrows(), m.ncols())));
        }
        let values = (0..g * g).map(|k| m[(k / g, k % g)]).collect();
        Ok(CovarianceSurface { grid, values, bandwidth: f64::NAN, loss, kernel: Kernel::Tricube, filled: vec![false; g * g] })
    }

    pub fn is_symmetric(&self) -> bool {
        let g = self.size();
        (0..g).all(|i| (0..i).all(|j| self.values[i * g + j] == self.values[j * g + i]))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Kernel-weighted sums `R_ab` on the lattice, plus the count of raw pairs per node.
struct KernelSums {
    r00: DMatrix<f64>,
    r10: DMatrix<f64>,
    pairs: DMatrix<f64>,
}

fn kernel_sums(raw: &RawCovariances, grid: &Grid, h: f64, kernel: Kernel) -> KernelSums {
    let g = grid.len();
    let v = raw.subject_weights();
    let contributing: Vec<usize> = (0..raw.subjects.len()).filter(|&i| v[i] > 0.0).collect();
    let n_obs: usize = contributing.iter().map(|&i| raw.subjects[i].times.len()).sum();

    // C = psi_j1 psi_j2 factorizes, so
    // R_ab = sum_i v_i [P_a(i, s) P_b(i, t) - sum_j A_a(j, s) A_b(j, t) psi_j^2]
    let mut p0 = DMatrix::<f64>::zeros(contributing.len(), g);
    let mut p1 = DMatrix::<f64>::zeros(contributing.len(), g);
    let mut pc = DMatrix::<f64>::zeros(contributing.len(), g);
    let mut d0 = DMatrix::<f64>::zeros(n_obs, g);
    let mut d1 = DMatrix::<f64>::zeros(n_obs, g);
    let mut dc = DMatrix::<f64>::zeros(n_obs, g);
    let mut row = 0;
    for (r, &i) in contributing.iter().enumerate() {
        let s = &raw.subjects[i];
        let sv = v[i].sqrt();
        for (&t, &psi) in s.times.iter().zip(&s.psi) {
            for (c, &node) in grid.points().iter().enumerate() {
                let d = t - node;
                if d.abs() >= h {
                    continue;
                }
                let k = kernel.scaled(d, h);
                let a0 = sv * k * psi;
                let a1 = a0 * d;
                p0[(r, c)] += a0;
                p1[(r, c)] += a1;
                d0[(row, c)] = a0;
                d1[(row, c)] = a1;
                if k > 0.0 {
                    pc[(r, c)] += 1.0;
                    dc[(row, c)] = 1.0;
                }
            }
            row += 1;
        }
    }
    let r00 = p0.transpose() * &p0 - d0.transpose() * &d0;
    let r10 = p1.transpose() * &p0 - d1.transpose() * &d0;
    // integer-valued, hence exact
    let pairs = pc.transpose() * &pc - dc.transpose() * &dc;
    KernelSums { r00, r10, pairs }
}

/// Closed-form local-linear covariance surface, symmetrized and with empty
/// windows filled from the nearest valid node.
pub fn estimate_cov_surface(
    raw: &RawCovariances,
    grid: &Grid,
    h: f64,
    kernel: Kernel,
    moments: &DesignMoments,
) -> Result<CovarianceSurface> {
    check_bandwidth(h)?;
    if moments.grid != *grid || moments.bandwidth != h || moments.kernel != kernel {
        return Err(Error::Contract("design moments were computed for a different grid, bandwidth or kernel".into()));
    }
    if raw.contributing_subjects() == 0 {
        return Err(Error::InvalidInput("no subject has two or more observations".into()));
    }
    let g = grid.len();
    let sums = kernel_sums(raw, grid, h, kernel);
    let mut values = vec![0.0; g * g];
    let mut valid = vec![true; g * g];
    for i in 0..g {
        for j in 0..g {
            if sums.pairs[(i, j)] < 0.5 {
                valid[i * g + j] = false;
                continue;
            }
            let w = moments.entries(i, j).w;
            // R01(s, t) = R10(t, s)
            values[i * g + j] = w[0] * sums.r00[(i, j)] + w[1] * sums.r10[(i, j)] + w[2] * sums.r10[(j, i)];
        }
    }
    fill_nearest_2d(&mut values, &valid, g).ok_or(Error::AllSingular { h })?;
    for i in 0..g {
        for j in 0..i {
            let m = 0.5 * (values[i * g + j] + values[j * g + i]);
            values[i * g + j] = m;
            values[j * g + i] = m;
        }
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite covariance value {bad}")));
    }
    Ok(CovarianceSurface {
        grid: grid.clone(),
        values,
        bandwidth: h,
        loss: raw.loss,
        kernel,
        filled: valid.iter().map(|v| !v).collect(),
    })
}

/// Moments and surface in one call.
pub fn smooth_covariance(raw: &RawCovariances, grid: &Grid, h: f64, kernel: Kernel, mode: MomentMode) -> Result<CovarianceSurface> {
    let moments = DesignMoments::on_grid(grid, h, kernel, mode)?;
    estimate_cov_surface(raw, grid, h, kernel, &moments)
}

fn held_out_error(raw: &RawCovariances, weights: &[f64], valid: &[usize], fit: &CovarianceSurface) -> f64 {
    let mut total = 0.0;
    for &i in valid {
        let s = &raw.subjects[i];
        let m = s.times.len();
        let mut acc = 0.0;
        for j1 in 0..m {
            for j2 in 0..m {
                if j1 != j2 {
                    let e = s.psi[j1] * s.psi[j2] - fit.eval(s.times[j1], s.times[j2]);
                    acc += e * e;
                }
            }
        }
        total += weights[i] * acc;
    }
    total
}

fn filter_candidates(candidates: &[f64], max_bandwidth: Option<f64>) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no bandwidth candidates".into()));
    }
    if candidates.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
        return Err(Error::InvalidInput("bandwidth candidates must be positive".into()));
    }
    let kept: Vec<f64> = candidates.iter().copied().filter(|&c| max_bandwidth.is_none_or(|m| c <= m)).collect();
    if kept.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no covariance bandwidth candidate is at most the mean bandwidth {}",
            max_bandwidth.unwrap_or(f64::NAN)
        )));
    }
    Ok(kept)
}

/// K-fold selection of the covariance bandwidth on fixed raw covariances,
/// scored by `sum v_i sum_{j1 != j2} (C_ij1j2 - C^(-k)(T_ij1, T_ij2))^2`.
/// Candidates above `max_bandwidth` (normally the mean bandwidth) are dropped.
#[allow(clippy::too_many_arguments)]
pub fn cv_bandwidth_cov(
    raw: &RawCovariances,
    candidates: &[f64],
    folds: usize,
    seed: u64,
    grid: &Grid,
    kernel: Kernel,
    mode: MomentMode,
    max_bandwidth: Option<f64>,
) -> Result<CvSelection> {
    let cands = filter_candidates(candidates, max_bandwidth)?;
    if cands.len() == 1 {
        return Ok(CvSelection { selected: cands[0], candidates: cands, scores: vec![None] });
    }
    let assignment = assign_folds(raw.subjects.len(), folds, seed)?;
    let weights = raw.subject_weights();
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds).map(|k| fold_split(&assignment, k)).collect();
    let scores: Vec<Option<f64>> = cands
        .par_iter()
        .map(|&h| -> Result<Option<f64>> {
            let moments = DesignMoments::on_grid(grid, h, kernel, mode)?;
            let mut total = 0.0;
            for (train, valid) in &splits {
                let sub = raw.select(train);
                let fit = match estimate_cov_surface(&sub, grid, h, kernel, &moments) {
                    Ok(f) => f,
                    Err(Error::AllSingular { .. }) | Err(Error::InvalidInput(_)) => return Ok(None),
                    Err(e) => return Err(e),
                };
                total += held_out_error(raw, &weights, valid, &fit);
            }
            Ok(total.is_finite().then_some(total))
        })
        .collect::<Result<_>>()?;
    let selected = select_min(&cands, &scores)?;
    Ok(CvSelection { selected, candidates: cands, scores })
}

/// Mean settings used when the covariance cross-validation refits the mean per fold.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanRefit {
    pub bandwidth: f64,
    pub options: SmootherOptions,
    pub loss: Loss,
}

/// Like [`cv_bandwidth_cov`] but the mean is re-estimated on each training
/// fold and both training and held-out raw covariances use that fold's mean.
#[allow(clippy::too_many_arguments)]
pub fn cv_bandwidth_cov_refit(
    data: &FunctionalDataset,
    refit: &MeanRefit,
    candidates: &[f64],
    folds: usize,
    seed: u64,
    grid: &Grid,
    kernel: Kernel,
    mode: MomentMode,
    max_bandwidth: Option<f64>,
) -> Result<CvSelection> {
    let cands = filter_candidates(candidates, max_bandwidth)?;
    if cands.len() == 1 {
        return Ok(CvSelection { selected: cands[0], candidates: cands, scores: vec![None] });
    }
    let assignment = assign_folds(data.n(), folds, seed)?;
    let mut fold_raw = Vec::with_capacity(folds);
    for k in 0..folds {
        let (train, valid) = fold_split(&assignment, k);
        let train_data = data.select(&train)?;
        let mean = crate::smoothing::estimate_mean_curve(&train_data, grid, refit.bandwidth, refit.options, &refit.loss)?;
        let train_raw = raw_covariances(&train_data, &mean, &refit.loss)?;
        let valid_raw = raw_covariances(&data.select(&valid)?, &mean, &refit.loss)?;
        fold_raw.push((train_raw, valid_raw));
    }
    // held-out weights follow the full-sample normalization
    let n_full = data.subjects().iter().filter(|s| s.len() >= 2).count() as f64;
    let mut scores = Vec::with_capacity(cands.len());
    for &h in &cands {
        let moments = DesignMoments::on_grid(grid, h, kernel, mode)?;
        let mut total = 0.0;
        let mut ok = true;
        for (train_raw, valid_raw) in &fold_raw {
            let fit = match estimate_cov_surface(train_raw, grid, h, kernel, &moments) {
                Ok(f) => f,
                Err(Error::AllSingular { .. }) | Err(Error::InvalidInput(_)) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            };
            let w: Vec<f64> = valid_raw
                .subjects
                .iter()
                .map(|s| {
                    let m = s.times.len() as f64;
                    if s.times.len() >= 2 {
                        1.0 / (n_full * m * (m - 1.0))
                    } else {
                        0.0
                    }
                })
                .collect();
            let all: Vec<usize> = (0..valid_raw.subjects.len()).collect();
            total += held_out_error(valid_raw, &w, &all, &fit);
        }
        scores.push((ok && total.is_finite()).then_some(total));
    }
    let selected = select_min(&cands, &scores)?;
    Ok(CvSelection { selected, candidates: cands, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Subject;
    use rand_distr::{Distribution, Normal};

    fn random_raw(seed: u64, n: usize, m: usize) -> RawCovariances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..n)
            .map(|i| {
                let times: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
                let psi = (0..m).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                RescaledSubject { id: i.to_string(), times, psi }
            })
            .collect();
        RawCovariances { subjects, loss: Loss::LOG_COSH }
    }

    #[test]
    fn record_count_and_symmetry() {
        let raw = random_raw(1, 7, 4);
        let recs = raw.records();
        assert_eq!(recs.len(), 7 * 4 * 3);
        assert_eq!(raw.len(), recs.len());
        let d = FunctionalDataset::new(vec![Subject::new("a", vec![0.2, 0.7], vec![1.0, -2.0])]).unwrap();
        let mean = MeanEstimate::constant(Grid::uniform(5).unwrap(), 0.0, Loss::LOG_COSH);
        let raw = raw_covariances(&d, &mean, &Loss::LOG_COSH).unwrap();
        let recs = raw.records();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].value, recs[1].value);
        assert_eq!((recs[0].t1, recs[0].t2), (recs[1].t2, recs[1].t1));
    }

    #[test]
    fn residuals_at_the_mean_are_zero() {
        let d = FunctionalDataset::new(vec![Subject::new("a", vec![0.2, 0.7, 0.9], vec![0.5; 3])]).unwrap();
        let mean = MeanEstimate::constant(Grid::uniform(5).unwrap(), 0.5, Loss::ARCTAN_INTEGRAL);
        let raw = raw_covariances(&d, &mean, &Loss::ARCTAN_INTEGRAL).unwrap();
        assert!(raw.records().iter().all(|r| r.value == 0.0));
    }

    #[test]
    fn bounded_psi_bounds_raw_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 30.0).unwrap();
        let subjects = (0..20)
            .map(|i| {
                let times: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
                let values = (0..5).map(|_| normal.sample(&mut rng)).collect();
                Subject::new(i.to_string(), times, values)
            })
            .collect();
        let d = FunctionalDataset::new(subjects).unwrap();
        let mean = MeanEstimate::constant(Grid::uniform(5).unwrap(), 1.0, Loss::LOG_COSH);
        let raw = raw_covariances(&d, &mean, &Loss::LOG_COSH).unwrap();
        assert!(raw.records().iter().all(|r| r.value.abs() <= 1.0));
    }

    #[test]
    fn sign_flip_of_second_residual() {
        let loss = Loss::local_smooth_abs(0.3).unwrap();
        let d = FunctionalDataset::new(vec![Subject::new("a", vec![0.2, 0.7], vec![0.4, -1.3])]).unwrap();
        let flipped = FunctionalDataset::new(vec![Subject::new("a", vec![0.2, 0.7], vec![0.4, 1.3])]).unwrap();
        let mean = MeanEstimate::constant(Grid::uniform(5).unwrap(), 0.0, loss);
        let a = raw_covariances(&d, &mean, &loss).unwrap().records();
        let b = raw_covariances(&flipped, &mean, &loss).unwrap().records();
        assert_eq!(a[0].value, -b[0].value);
    }

    #[test]
    fn interior_factors() {
        for kernel in [Kernel::Tricube, Kernel::Epanechnikov] {
            let f = moment_factor(0.5, 0.2, kernel, MomentMode::Analytic).unwrap();
            assert!((f.value[0] - 1.0).abs() < 1e-10);
            assert!(f.value[1].abs() < 1e-10);
            assert!(f.value[2] > 0.0);
            let e = design_moments(0.3, 0.6, 0.2, kernel, MomentMode::Analytic).unwrap();
            assert!(e.s[1].abs() < 1e-10 && e.s[2].abs() < 1e-10);
            let norm = e.w[0] * e.s[0] + e.w[1] * e.s[1] + e.w[2] * e.s[2];
            assert!((norm - 1.0).abs() < 1e-8);
            // boundary node keeps the normalization too
            let e = design_moments(0.0, 0.95, 0.2, kernel, MomentMode::Analytic).unwrap();
            let norm = e.w[0] * e.s[0] + e.w[1] * e.s[1] + e.w[2] * e.s[2];
            assert!((norm - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn monte_carlo_moments_agree_with_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let h = 0.15;
        for rep in 0..20 {
            let s = rng.random::<f64>();
            let mode = MomentMode::MonteCarlo { samples: 100_000, seed: 1000 + rep };
            let mc = moment_factor(s, h, Kernel::Tricube, mode).unwrap();
            let an = moment_factor(s, h, Kernel::Tricube, MomentMode::Analytic).unwrap();
            for p in 0..3 {
                assert!(
                    (mc.value[p] - an.value[p]).abs() <= 3.0 * mc.std_error[p] + 1e-12,
                    "s={s} a={p}: {} vs {} (se {})",
                    mc.value[p],
                    an.value[p],
                    mc.std_error[p]
                );
            }
        }
    }

    /// Direct evaluation of the R_ab sums over all records.
    fn naive_surface(raw: &RawCovariances, grid: &Grid, h: f64, kernel: Kernel) -> Vec<f64> {
        let v = raw.subject_weights();
        let m = DesignMoments::on_grid(grid, h, kernel, MomentMode::Analytic).unwrap();
        let g = grid.len();
        let mut out = vec![0.0; g * g];
        for i in 0..g {
            for j in 0..g {
                let (s, t) = (grid.points()[i], grid.points()[j]);
                let mut r = [0.0; 3];
                for rec in raw.records() {
                    let k = kernel.scaled(rec.t1 - s, h) * kernel.scaled(rec.t2 - t, h) * rec.value * v[rec.subject];
                    r[0] += k;
                    r[1] += k * (rec.t1 - s);
                    r[2] += k * (rec.t2 - t);
                }
                let w = m.entries(i, j).w;
                out[i * g + j] = w[0] * r[0] + w[1] * r[1] + w[2] * r[2];
            }
        }
        out
    }

    #[test]
    fn factorized_sums_match_direct_sums() {
        let raw = random_raw(5, 40, 4);
        let grid = Grid::uniform(9).unwrap();
        let h = 0.3;
        let fast = smooth_covariance(&raw, &grid, h, Kernel::Tricube, MomentMode::Analytic).unwrap();
        let slow = naive_surface(&raw, &grid, h, Kernel::Tricube);
        let g = grid.len();
        for i in 0..g {
            for j in 0..g {
                let sym = 0.5 * (slow[i * g + j] + slow[j * g + i]);
                assert!((fast.at(i, j) - sym).abs() < 1e-10, "{i},{j}");
            }
        }
        assert!(fast.is_symmetric());
        assert!(fast.filled.iter().all(|f| !f));
    }

    #[test]
    fn zero_raw_gives_zero_surface() {
        let mut raw = random_raw(6, 10, 3);
        for s in &mut raw.subjects {
            s.psi.iter_mut().for_each(|p| *p = 0.0);
        }
        let grid = Grid::uniform(11).unwrap();
        let surf = smooth_covariance(&raw, &grid, 0.3, Kernel::Tricube, MomentMode::Analytic).unwrap();
        assert!(surf.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_windows_are_filled() {
        let raw = RawCovariances {
            subjects: vec![RescaledSubject { id: "a".into(), times: vec![0.1, 0.15], psi: vec![0.5, 0.5] }],
            loss: Loss::LOG_COSH,
        };
        let grid = Grid::uniform(11).unwrap();
        let surf = smooth_covariance(&raw, &grid, 0.1, Kernel::Tricube, MomentMode::Analytic).unwrap();
        assert!(surf.filled[10 * 11 + 10]);
        assert!(!surf.filled[11 + 1]);
        assert!(surf.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mismatched_moments_are_rejected() {
        let raw = random_raw(3, 10, 3);
        let grid = Grid::uniform(11).unwrap();
        let m = DesignMoments::on_grid(&grid, 0.2, Kernel::Tricube, MomentMode::Analytic).unwrap();
        assert!(matches!(estimate_cov_surface(&raw, &grid, 0.3, Kernel::Tricube, &m), Err(Error::Contract(_))));
    }

    #[test]
    fn cv_edge_cases() {
        let raw = random_raw(4, 30, 4);
        let grid = Grid::uniform(11).unwrap();
        let cv = |c: &[f64], max| cv_bandwidth_cov(&raw, c, 2, 3, &grid, Kernel::Tricube, MomentMode::Analytic, max);
        assert_eq!(cv(&[0.3], None).unwrap().selected, 0.3);
        assert_eq!(cv(&[0.3, 0.5], Some(0.4)).unwrap().selected, 0.3);
        assert!(cv(&[0.5], Some(0.4)).is_err());
        let sel = cv(&[0.15, 0.25, 0.35, 0.5], None).unwrap();
        let pos = sel.candidates.iter().position(|&c| c == sel.selected).unwrap();
        let best = sel.scores[pos].unwrap();
        assert!(sel.scores.iter().flatten().all(|&s| best <= s));
    }
}
