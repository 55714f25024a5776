//! Robust local-linear mean estimation.
//!
//! The local-linear fit at `t` is rewritten as a weighted location problem:
//! each observation gets a local extension multiplier
//! `omega = K_h(T - t) (u2 - u1 (T - t)) / (u0 u2 - u1^2)`, and the mean is the
//! minimizer of `sum gamma * omega * rho(X - beta)` over a single `beta`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{assign_folds, fold_split, FunctionalDataset, Pooled, SubjectWeighting};
use crate::error::{Error, Result};
use crate::grid::{fill_nearest_1d, Grid};
use crate::kernel::Kernel;
use crate::loss::{Loss, LossFamily};

/// Coarse grid size of the location search.
const SEARCH_POINTS: usize = 201;
const GOLDEN_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SmootherOptions {
    pub kernel: Kernel,
    pub weighting: SubjectWeighting,
}

/// Local extension multipliers at one time point, restricted to observations
/// inside the kernel window.
#[derive(Debug, Clone)]
pub struct LocalWeights {
    pub t: f64,
    pub h: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub gammas: Vec<f64>,
    pub omegas: Vec<f64>,
}

impl LocalWeights {
    /// Combined weights `gamma * omega`.
    pub fn combined(&self) -> Vec<f64> {
        self.gammas.iter().zip(&self.omegas).map(|(g, o)| g * o).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    pub loss: Loss,
    pub kernel: Kernel,
    /// Grid points whose local design was singular and were filled from a neighbour.
    pub filled: Vec<bool>,
}

impl MeanEstimate {
    /// Mean at any `t` by linear interpolation between grid values.
    pub fn eval(&self, t: f64) -> f64 {
        self.grid.interpolate(&self.values, t)
    }

    pub fn filled_count(&self) -> usize {
        self.filled.iter().filter(|&&f| f).count()
    }

    /// A constant-valued estimate, mostly useful in tests.
    pub fn constant(grid: Grid, value: f64, loss: Loss) -> Self {
        let g = grid.len();
        MeanEstimate { grid, values: vec![value; g], bandwidth: f64::NAN, loss, kernel: Kernel::Tricube, filled: vec![false; g] }
    }
}

/// Outcome of a cross-validated parameter search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub selected: f64,
    pub candidates: Vec<f64>,
    /// `None` marks a candidate that could not be fitted on some fold.
    pub scores: Vec<Option<f64>>,
}

/// Minimum of the scores with ties broken toward the smaller candidate.
pub(crate) fn select_min(candidates: &[f64], scores: &[Option<f64>]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (&c, s) in candidates.iter().zip(scores) {
        let Some(s) = *s else { continue };
        best = match best {
            None => Some((c, s)),
            Some((bc, bs)) => {
                if s < bs || (s == bs && c < bc) {
                    Some((c, s))
                } else {
                    Some((bc, bs))
                }
            }
        };
    }
    best.map(|b| b.0).ok_or(Error::NoValidCandidate)
}

pub(crate) struct MeanSmoother {
    pooled: Pooled,
    kernel: Kernel,
}

impl MeanSmoother {
    pub fn new(data: &FunctionalDataset, opts: SmootherOptions) -> Self {
        MeanSmoother { pooled: Pooled::new(data, opts.weighting), kernel: opts.kernel }
    }

    pub fn local_weights(&self, t: f64, h: f64) -> Result<LocalWeights> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
        }
        let p = &self.pooled;
        let range = p.window(t - h, t + h);
        let n = range.len();
        let mut kern = Vec::with_capacity(n);
        let (mut u0, mut u1, mut u2) = (0.0, 0.0, 0.0);
        let mut distinct = 0usize;
        let mut last = f64::NAN;
        for idx in range.clone() {
            let d = p.times[idx] - t;
            let k = p.gammas[idx] * self.kernel.scaled(d, h);
            kern.push(k);
            if k > 0.0 {
                u0 += k;
                u1 += k * d;
                u2 += k * d * d;
                if p.times[idx] != last {
                    distinct += 1;
                    last = p.times[idx];
                }
            }
        }
        let sigma2 = u0 * u2 - u1 * u1;
        if distinct < 2 || !(sigma2 > 1e-12 * h.powi(4)) {
            return Err(Error::SingularDesign { t, h });
        }
        let mut out = LocalWeights {
            t,
            h,
            times: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            gammas: Vec::with_capacity(n),
            omegas: Vec::with_capacity(n),
        };
        for (idx, k) in range.zip(kern) {
            if k <= 0.0 {
                continue;
            }
            let d = p.times[idx] - t;
            let g = p.gammas[idx];
            out.times.push(p.times[idx]);
            out.values.push(p.values[idx]);
            out.gammas.push(g);
            // k already carries gamma
            out.omegas.push(k / g * (u2 - u1 * d) / sigma2);
        }
        Ok(out)
    }

    pub fn at(&self, t: f64, h: f64, loss: &Loss) -> Result<f64> {
        let lw = self.local_weights(t, h)?;
        let w = lw.combined();
        weighted_location(&w, &lw.values, loss)
    }

    pub fn curve(&self, grid: &Grid, h: f64, loss: &Loss) -> Result<MeanEstimate> {
        loss.validate()?;
        let results: Vec<Result<f64>> = grid.points().par_iter().map(|&t| self.at(t, h, loss)).collect();
        let mut values = Vec::with_capacity(grid.len());
        let mut valid = Vec::with_capacity(grid.len());
        for r in results {
            match r {
                Ok(v) => {
                    values.push(v);
                    valid.push(true);
                }
                Err(Error::SingularDesign { .. }) => {
                    values.push(f64::NAN);
                    valid.push(false);
                }
                Err(e) => return Err(e),
            }
        }
        fill_nearest_1d(&mut values, &valid).ok_or(Error::AllSingular { h })?;
        Ok(MeanEstimate {
            grid: grid.clone(),
            values,
            bandwidth: h,
            loss: *loss,
            kernel: self.kernel,
            filled: valid.iter().map(|v| !v).collect(),
        })
    }
}

/// Minimizer of `sum w_i rho(x_i - beta)` where the weights sum to one but may be
/// negative. Square loss uses the closed form `sum w_i x_i`; other families use a
/// coarse grid over `[min x - R, max x + R]` and golden-section refinement.
pub fn weighted_location(weights: &[f64], values: &[f64], loss: &Loss) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidInput("no observations for location estimate".into()));
    }
    if loss.family == LossFamily::Square {
        return Ok(weights.iter().zip(values).map(|(w, x)| w * x).sum());
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = hi - lo;
    if range == 0.0 {
        return Ok(lo);
    }
    let objective = |beta: f64| -> f64 { weights.iter().zip(values).map(|(w, x)| w * loss.rho(x - beta)).sum() };
    let start = lo - range;
    let step = 3.0 * range / (SEARCH_POINTS - 1) as f64;
    let mut best_i = 0;
    let mut best_v = f64::INFINITY;
    for i in 0..SEARCH_POINTS {
        let v = objective(start + step * i as f64);
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let mut a = start + step * best_i.saturating_sub(1) as f64;
    let mut b = start + step * (best_i + 1).min(SEARCH_POINTS - 1) as f64;
    let tol = 1e-8 * (1.0 + range);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = objective(c);
    let mut fd = objective(d);
    let mut iter = 0;
    while b - a > tol {
        iter += 1;
        if iter > GOLDEN_MAX_ITER {
            return Err(Error::Numeric(format!(
                "golden-section search did not converge: bracket [{a}, {b}], tolerance {tol}"
            )));
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    let mid = 0.5 * (a + b);
    // keep the grid minimizer if refinement drifted onto a worse point
    let grid_beta = start + step * best_i as f64;
    if objective(mid) <= best_v {
        Ok(mid)
    } else {
        Ok(grid_beta)
    }
}

/// Local extension multipliers at `t` together with the observation weights.
pub fn local_weights(data: &FunctionalDataset, t: f64, h: f64, opts: SmootherOptions) -> Result<LocalWeights> {
    MeanSmoother::new(data, opts).local_weights(t, h)
}

/// Robust local-linear mean at a single time point.
pub fn estimate_mean_at(data: &FunctionalDataset, t: f64, h: f64, opts: SmootherOptions, loss: &Loss) -> Result<f64> {
    loss.validate()?;
    MeanSmoother::new(data, opts).at(t, h, loss)
}

/// Robust local-linear mean on a grid. Singular grid points are filled from the
/// nearest valid neighbour and flagged in [`MeanEstimate::filled`].
pub fn estimate_mean_curve(
    data: &FunctionalDataset,
    grid: &Grid,
    h: f64,
    opts: SmootherOptions,
    loss: &Loss,
) -> Result<MeanEstimate> {
    MeanSmoother::new(data, opts).curve(grid, h, loss)
}

/// Default bandwidth candidates: `count` log-spaced values from
/// `1.5 x` the median pooled time gap up to `upper`.
pub fn default_bandwidth_candidates(data: &FunctionalDataset, count: usize, upper: f64) -> Vec<f64> {
    let gap = data.median_time_gap();
    let lower = if gap > 0.0 { 1.5 * gap } else { 0.01 };
    log_spaced(lower, upper, count)
}

pub(crate) fn log_spaced(lower: f64, upper: f64, count: usize) -> Vec<f64> {
    if count <= 1 || lower >= upper {
        return vec![upper];
    }
    let (a, b) = (lower.ln(), upper.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

struct FoldPlan {
    folds: usize,
    train: Vec<FunctionalDataset>,
    valid: Vec<Vec<usize>>,
}

impl FoldPlan {
    fn new(data: &FunctionalDataset, folds: usize, seed: u64) -> Result<Self> {
        let assignment = assign_folds(data.n(), folds, seed)?;
        let mut train = Vec::with_capacity(folds);
        let mut valid = Vec::with_capacity(folds);
        for k in 0..folds {
            let (tr, va) = fold_split(&assignment, k);
            train.push(data.select(&tr)?);
            valid.push(va);
        }
        Ok(FoldPlan { folds, train, valid })
    }
}

/// Held-out fits for each fold, or `None` if some fold could not be fitted.
fn fold_fits(plan: &FoldPlan, grid: &Grid, h: f64, opts: SmootherOptions, loss: &Loss) -> Result<Option<Vec<MeanEstimate>>> {
    let mut fits = Vec::with_capacity(plan.folds);
    for train in &plan.train {
        match MeanSmoother::new(train, opts).curve(grid, h, loss) {
            Ok(m) => fits.push(m),
            Err(Error::AllSingular { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(fits))
}

fn check_candidates(candidates: &[f64], what: &str) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput(format!("no {what} candidates")));
    }
    if candidates.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} candidates must be positive")));
    }
    Ok(())
}

/// K-fold (leave whole subjects out) selection of the mean bandwidth by the
/// held-out robust error `sum gamma_i sum_j rho(X_ij - mu^(-k)(T_ij))`.
pub fn cv_bandwidth_mean(
    data: &FunctionalDataset,
    candidates: &[f64],
    folds: usize,
    seed: u64,
    grid: &Grid,
    opts: SmootherOptions,
    loss: &Loss,
) -> Result<CvSelection> {
    check_candidates(candidates, "bandwidth")?;
    loss.validate()?;
    if candidates.len() == 1 {
        return Ok(CvSelection { selected: candidates[0], candidates: candidates.to_vec(), scores: vec![None] });
    }
    let plan = FoldPlan::new(data, folds, seed)?;
    let gammas = data.subject_weights(opts.weighting);
    let mut scores = Vec::with_capacity(candidates.len());
    for &h in candidates {
        let score = match fold_fits(&plan, grid, h, opts, loss)? {
            None => None,
            Some(fits) => {
                let mut total = 0.0;
                for (fit, valid) in fits.iter().zip(&plan.valid) {
                    for &i in valid {
                        let s = &data.subjects()[i];
                        total += gammas[i] * s.iter().map(|(t, x)| loss.rho(x - fit.eval(t))).sum::<f64>();
                    }
                }
                total.is_finite().then_some(total)
            }
        };
        scores.push(score);
    }
    let selected = select_min(candidates, &scores)?;
    Ok(CvSelection { selected, candidates: candidates.to_vec(), scores })
}

/// How the mean bandwidth is chosen while tuning `kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    Fixed(f64),
    CrossValidated(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSelection {
    pub selected: f64,
    /// Mean bandwidth used with the selected `kappa`.
    pub bandwidth: f64,
    pub candidates: Vec<f64>,
    pub bandwidths: Vec<f64>,
    pub scores: Vec<Option<f64>>,
}

/// K-fold selection of `kappa` for the locally smoothed absolute loss by the
/// held-out squared error `sum_i sum_j (X_ij - mu^(-k)(T_ij))^2`.
#[allow(clippy::too_many_arguments)]
pub fn cv_kappa(
    data: &FunctionalDataset,
    kappa_candidates: &[f64],
    folds: usize,
    seed: u64,
    grid: &Grid,
    opts: SmootherOptions,
    rule: &BandwidthRule,
) -> Result<KappaSelection> {
    check_candidates(kappa_candidates, "kappa")?;
    let bandwidth_for = |loss: &Loss| -> Result<f64> {
        match rule {
            BandwidthRule::Fixed(h) => Ok(*h),
            BandwidthRule::CrossValidated(c) => Ok(cv_bandwidth_mean(data, c, folds, seed, grid, opts, loss)?.selected),
        }
    };
    if kappa_candidates.len() == 1 {
        let k = kappa_candidates[0];
        let h = bandwidth_for(&Loss::local_smooth_abs(k)?)?;
        return Ok(KappaSelection {
            selected: k,
            bandwidth: h,
            candidates: vec![k],
            bandwidths: vec![h],
            scores: vec![None],
        });
    }
    let plan = FoldPlan::new(data, folds, seed)?;
    let mut scores = Vec::with_capacity(kappa_candidates.len());
    let mut bandwidths = Vec::with_capacity(kappa_candidates.len());
    for &kappa in kappa_candidates {
        let loss = Loss::local_smooth_abs(kappa)?;
        let h = match bandwidth_for(&loss) {
            Ok(h) => h,
            Err(Error::NoValidCandidate) => {
                bandwidths.push(f64::NAN);
                scores.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        bandwidths.push(h);
        let score = match fold_fits(&plan, grid, h, opts, &loss)? {
            None => None,
            Some(fits) => {
                let mut total = 0.0;
                for (fit, valid) in fits.iter().zip(&plan.valid) {
                    for &i in valid {
                        total += data.subjects()[i].iter().map(|(t, x)| (x - fit.eval(t)).powi(2)).sum::<f64>();
                    }
                }
                total.is_finite().then_some(total)
            }
        };
        scores.push(score);
    }
    let selected = select_min(kappa_candidates, &scores)?;
    let pos = kappa_candidates.iter().position(|&k| k == selected).unwrap();
    Ok(KappaSelection {
        selected,
        bandwidth: bandwidths[pos],
        candidates: kappa_candidates.to_vec(),
        bandwidths,
        scores,
    })
}
