//! End-to-end estimation: loss tuning, mean, covariance, eigen-analysis and scores.

use serde::{Deserialize, Serialize};

use crate::covariance::{
    cv_bandwidth_cov, cv_bandwidth_cov_refit, raw_covariances, smooth_covariance, CovarianceSurface, MeanRefit,
    MomentMode, RawCovariances,
};
use crate::data::FunctionalDataset;
use crate::error::{Error, Result};
use crate::fpca::{eigen_decompose, estimate_scores, ComponentRule, EigenSystem, ScoreMatrix};
use crate::grid::Grid;
use crate::loss::Loss;
use crate::smoothing::{
    cv_bandwidth_mean, cv_kappa, default_bandwidth_candidates, estimate_mean_curve, BandwidthRule, CvSelection,
    KappaSelection, MeanEstimate, SmootherOptions,
};

/// Either a fixed loss or a locally smoothed absolute loss whose `kappa` is cross-validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossChoice {
    Fixed(Loss),
    TunedKappa(Vec<f64>),
}

impl Default for LossChoice {
    fn default() -> Self {
        LossChoice::Fixed(Loss::LOG_COSH)
    }
}

/// Kappa candidates used when none are given.
pub const DEFAULT_KAPPAS: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub loss: LossChoice,
    pub smoother: SmootherOptions,
    pub grid_size: usize,
    pub folds: usize,
    pub seed: u64,
    /// Explicit mean bandwidth candidates; defaults are derived from the data.
    pub mean_bandwidths: Option<Vec<f64>>,
    pub cov_bandwidths: Option<Vec<f64>>,
    pub bandwidth_count: usize,
    pub bandwidth_upper: f64,
    pub moment_mode: MomentMode,
    /// Re-estimate the mean on each training fold during covariance cross-validation.
    pub refit_mean_in_cv: bool,
    pub split_sample: bool,
    pub components: ComponentRule,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            loss: LossChoice::default(),
            smoother: SmootherOptions::default(),
            grid_size: 101,
            folds: 2,
            seed: 0,
            mean_bandwidths: None,
            cov_bandwidths: None,
            bandwidth_count: 8,
            bandwidth_upper: 0.5,
            moment_mode: MomentMode::Analytic,
            refit_mean_in_cv: false,
            split_sample: false,
            components: ComponentRule::default(),
        }
    }
}

impl FitConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::uniform(self.grid_size)
    }

    fn mean_candidates(&self, data: &FunctionalDataset) -> Vec<f64> {
        match &self.mean_bandwidths {
            Some(c) => c.clone(),
            None => default_bandwidth_candidates(data, self.bandwidth_count, self.bandwidth_upper),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFit {
    pub loss: Loss,
    pub kappa: Option<KappaSelection>,
    pub bandwidth: CvSelection,
    pub mean: MeanEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceFit {
    pub raw: RawCovariances,
    pub bandwidth: CvSelection,
    pub surface: CovarianceSurface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub mean: MeanFit,
    pub covariance: CovarianceFit,
    pub eigen: EigenSystem,
    pub scores: ScoreMatrix,
    /// Subjects used for the mean and for the covariance when the sample was split.
    pub split: Option<(usize, usize)>,
}

/// Loss selection (when tuned), mean bandwidth selection and the mean curve.
pub fn fit_mean(data: &FunctionalDataset, config: &FitConfig) -> Result<MeanFit> {
    let grid = config.grid()?;
    let candidates = config.mean_candidates(data);
    let (loss, kappa) = match &config.loss {
        LossChoice::Fixed(l) => (*l, None),
        LossChoice::TunedKappa(kappas) => {
            let kappas = if kappas.is_empty() { DEFAULT_KAPPAS.to_vec() } else { kappas.clone() };
            let rule = BandwidthRule::CrossValidated(candidates.clone());
            let sel = cv_kappa(data, &kappas, config.folds, config.seed, &grid, config.smoother, &rule)?;
            (Loss::local_smooth_abs(sel.selected)?, Some(sel))
        }
    };
    let bandwidth = cv_bandwidth_mean(data, &candidates, config.folds, config.seed, &grid, config.smoother, &loss)?;
    let mean = estimate_mean_curve(data, &grid, bandwidth.selected, config.smoother, &loss)?;
    Ok(MeanFit { loss, kappa, bandwidth, mean })
}

/// Raw covariances around `mean`, covariance bandwidth selection (capped at
/// the mean bandwidth) and the smoothed surface.
pub fn fit_covariance(data: &FunctionalDataset, mean: &MeanFit, config: &FitConfig) -> Result<CovarianceFit> {
    let grid = config.grid()?;
    let loss = mean.loss;
    let h_mu = mean.bandwidth.selected;
    let raw = raw_covariances(data, &mean.mean, &loss)?;
    let candidates = match &config.cov_bandwidths {
        Some(c) => c.clone(),
        None => {
            let c: Vec<f64> = default_bandwidth_candidates(data, config.bandwidth_count, config.bandwidth_upper)
                .into_iter()
                .filter(|&h| h <= h_mu)
                .collect();
            if c.is_empty() {
                vec![h_mu]
            } else {
                c
            }
        }
    };
    let kernel = config.smoother.kernel;
    let bandwidth = if config.refit_mean_in_cv {
        let refit = MeanRefit { bandwidth: h_mu, options: config.smoother, loss };
        cv_bandwidth_cov_refit(data, &refit, &candidates, config.folds, config.seed, &grid, kernel, config.moment_mode, Some(h_mu))?
    } else {
        cv_bandwidth_cov(&raw, &candidates, config.folds, config.seed, &grid, kernel, config.moment_mode, Some(h_mu))?
    };
    let surface = smooth_covariance(&raw, &grid, bandwidth.selected, kernel, config.moment_mode)?;
    Ok(CovarianceFit { raw, bandwidth, surface })
}

/// Mean from the first `floor(n / 2)` subjects, covariance from the rest, in
/// input order.
pub fn split_sample_fit(data: &FunctionalDataset, config: &FitConfig) -> Result<(MeanFit, CovarianceFit)> {
    let n = data.n();
    if n < 4 {
        return Err(Error::InvalidInput(format!("sample splitting needs at least 4 subjects, got {n}")));
    }
    let half = n / 2;
    let first: Vec<usize> = (0..half).collect();
    let second: Vec<usize> = (half..n).collect();
    let mean = fit_mean(&data.select(&first)?, config)?;
    let cov = fit_covariance(&data.select(&second)?, &mean, config)?;
    Ok((mean, cov))
}

/// The full pipeline. Scores are computed for every subject.
pub fn fit(data: &FunctionalDataset, config: &FitConfig) -> Result<FitResult> {
    let (mean, covariance, split) = if config.split_sample {
        let (m, c) = split_sample_fit(data, config)?;
        let half = data.n() / 2;
        (m, c, Some((half, data.n() - half)))
    } else {
        let m = fit_mean(data, config)?;
        let c = fit_covariance(data, &m, config)?;
        (m, c, None)
    };
    let eigen = eigen_decompose(&covariance.surface, config.components)?;
    let scores = estimate_scores(data, &mean.mean, &eigen, &mean.loss)?;
    Ok(FitResult { mean, covariance, eigen, scores, split })
}
