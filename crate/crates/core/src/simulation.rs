//! Synthetic populations `X = sum_k zeta_k phi_k` with `phi_k = sqrt(2) sin(k pi t)`,
//! Monte-Carlo ground truth for the robust mean and covariance, and the
//! repeated-run error tables.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, LogNormal, Normal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceSurface, MomentMode};
use crate::data::{FunctionalDataset, Subject};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernel::Kernel;
use crate::loss::{Loss, LossFamily};
use crate::pipeline::{fit_covariance, fit_mean, FitConfig, LossChoice, DEFAULT_KAPPAS};
use crate::smoothing::{MeanEstimate, SmootherOptions};

/// `sqrt(2) sin(k pi t)`, `k >= 1`.
#[inline]
pub fn basis(k: usize, t: f64) -> f64 {
    std::f64::consts::SQRT_2 * (k as f64 * std::f64::consts::PI * t).sin()
}

/// Law of the k-th score `zeta_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreFamily {
    /// `Normal(0, k^2)`.
    Normal,
    /// Student t with `k` degrees of freedom.
    StudentT,
    /// `SLN(0, k^2)`.
    SymmetricLogNormal,
    /// `Beta(2k, k) - 2/3`.
    CenteredBeta,
    /// `zeta_k = 1`, for testing.
    Pinned,
}

impl ScoreFamily {
    pub fn name(self) -> &'static str {
        match self {
            ScoreFamily::Normal => "normal",
            ScoreFamily::StudentT => "student-t",
            ScoreFamily::SymmetricLogNormal => "symmetric-log-normal",
            ScoreFamily::CenteredBeta => "centered-beta",
            ScoreFamily::Pinned => "pinned",
        }
    }

    /// Short label used in table cells.
    pub fn short_name(self) -> &'static str {
        match self {
            ScoreFamily::Normal => "normal",
            ScoreFamily::StudentT => "t",
            ScoreFamily::SymmetricLogNormal => "sln",
            ScoreFamily::CenteredBeta => "beta",
            ScoreFamily::Pinned => "pinned",
        }
    }

    /// Whether every score law is symmetric about zero.
    pub fn is_symmetric(self) -> bool {
        matches!(self, ScoreFamily::Normal | ScoreFamily::StudentT | ScoreFamily::SymmetricLogNormal)
    }

    fn code(self) -> u64 {
        match self {
            ScoreFamily::Normal => 1,
            ScoreFamily::StudentT => 2,
            ScoreFamily::SymmetricLogNormal => 3,
            ScoreFamily::CenteredBeta => 4,
            ScoreFamily::Pinned => 5,
        }
    }

    /// Draws `zeta_1, ..., zeta_K` into `out`.
    fn draw_scores<R: Rng + ?Sized>(self, out: &mut [f64], rng: &mut R) {
        for (i, z) in out.iter_mut().enumerate() {
            let k = (i + 1) as f64;
            *z = match self {
                ScoreFamily::Normal => Normal::new(0.0, k).unwrap().sample(rng),
                ScoreFamily::StudentT => StudentT::new(k).unwrap().sample(rng),
                ScoreFamily::SymmetricLogNormal => sample_sln(0.0, k * k, rng).unwrap(),
                ScoreFamily::CenteredBeta => sample_centered_beta(2.0 * k, k, rng).unwrap(),
                ScoreFamily::Pinned => 1.0,
            };
        }
    }
}

impl fmt::Display for ScoreFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(ScoreFamily::Normal),
            "student-t" | "t" => Ok(ScoreFamily::StudentT),
            "symmetric-log-normal" | "sln" => Ok(ScoreFamily::SymmetricLogNormal),
            "centered-beta" | "beta" => Ok(ScoreFamily::CenteredBeta),
            "pinned" => Ok(ScoreFamily::Pinned),
            other => Err(Error::InvalidInput(format!("unknown score family '{other}'"))),
        }
    }
}

/// Symmetric log-normal draw: `LN(mu, sigma2)` times an independent fair sign.
pub fn sample_sln<R: Rng + ?Sized>(mu: f64, sigma2: f64, rng: &mut R) -> Result<f64> {
    if !(sigma2 > 0.0) || !mu.is_finite() || !sigma2.is_finite() {
        return Err(Error::InvalidInput(format!("SLN needs finite mu and sigma2 > 0, got ({mu}, {sigma2})")));
    }
    let z = LogNormal::new(mu, sigma2.sqrt()).map_err(|e| Error::InvalidInput(e.to_string()))?.sample(rng);
    Ok(if rng.random::<bool>() { z } else { -z })
}

/// `Beta(alpha, beta) - alpha / (alpha + beta)`.
pub fn sample_centered_beta<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::InvalidInput(format!("Beta parameters must be positive, got ({alpha}, {beta})")));
    }
    let b = Beta::new(alpha, beta).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(b.sample(rng) - alpha / (alpha + beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub basis_count: usize,
    pub family: ScoreFamily,
    /// Probability that an observation is replaced by a contamination draw.
    pub contamination_prob: f64,
    pub contamination_location: f64,
    pub contamination_sd: f64,
    pub n: usize,
    pub m: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            basis_count: 2,
            family: ScoreFamily::Normal,
            contamination_prob: 0.0,
            contamination_location: 10.0,
            contamination_sd: 0.1,
            n: 100,
            m: 5,
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.basis_count == 0 || self.n == 0 || self.m == 0 {
            return Err(Error::InvalidInput("basis count, n and m must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.contamination_prob) {
            return Err(Error::InvalidInput(format!(
                "contamination probability must be in [0, 1], got {}",
                self.contamination_prob
            )));
        }
        if !(self.contamination_sd >= 0.0) || !self.contamination_location.is_finite() || !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidInput("contamination and noise parameters must be finite, sds non-negative".into()));
        }
        Ok(())
    }

    /// Curve value for the given scores.
    fn curve(scores: &[f64], t: f64) -> f64 {
        scores.iter().enumerate().map(|(i, z)| z * basis(i + 1, t)).sum()
    }
}

/// A ChaCha stream for one replicate: the master seed fixes the key and
/// `stream` selects an independent keystream, so replicates can be generated
/// in any order or in parallel.
pub fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn stream_id(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn prob_code(p: f64) -> u64 {
    (p * 1e6).round() as u64
}

/// Dataset from `config.seed`.
pub fn sample_dataset(config: &SimConfig) -> Result<FunctionalDataset> {
    sample_dataset_with(config, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

/// Scores, uniform times, optional Gaussian noise, then contamination, per subject.
pub fn sample_dataset_with<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Result<FunctionalDataset> {
    config.validate()?;
    let noise = Normal::new(0.0, config.noise_sd).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let outlier = Normal::new(config.contamination_location, config.contamination_sd)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut scores = vec![0.0; config.basis_count];
    let mut subjects = Vec::with_capacity(config.n);
    for i in 0..config.n {
        config.family.draw_scores(&mut scores, rng);
        let times: Vec<f64> = (0..config.m).map(|_| rng.random::<f64>()).collect();
        let mut values = Vec::with_capacity(config.m);
        for &t in &times {
            let mut x = SimConfig::curve(&scores, t);
            if config.noise_sd > 0.0 {
                x += noise.sample(rng);
            }
            if config.contamination_prob > 0.0 && rng.random::<f64>() < config.contamination_prob {
                x = outlier.sample(rng);
            }
            values.push(x);
        }
        subjects.push(Subject::new((i + 1).to_string(), times, values));
    }
    FunctionalDataset::new(subjects)
}

/// Which population the ground truth describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthPopulation {
    /// Observed law, contamination included.
    #[default]
    Contaminated,
    /// Uncontaminated curves `sum_k zeta_k phi_k`.
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthOptions {
    pub samples: usize,
    pub reps: usize,
    pub seed: u64,
    pub population: TruthPopulation,
    pub covariance: bool,
    /// Use `mu_r = 0` for symmetric uncontaminated populations instead of solving for it.
    pub exploit_symmetry: bool,
}

impl Default for TruthOptions {
    fn default() -> Self {
        TruthOptions {
            samples: 1_000_000,
            reps: 2,
            seed: 0,
            population: TruthPopulation::Contaminated,
            covariance: true,
            exploit_symmetry: true,
        }
    }
}

/// Monte-Carlo robust mean and covariance on a grid, averaged over replicates
/// with the spread across replicates as standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTables {
    pub grid: Grid,
    pub loss: Loss,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// Row-major `G x G`.
    pub covariance: Option<Vec<f64>>,
    pub covariance_se: Option<Vec<f64>>,
    pub samples: usize,
    pub reps: usize,
    pub seed: u64,
}

const TRUTH_TAG: u64 = 0x7275_7468;
const BISECTION_TOL: f64 = 1e-10;

/// Root of the nonincreasing map `beta -> mean psi(x - beta)`.
fn robust_location(x: &[f64], loss: &Loss) -> Result<f64> {
    let (mut lo, mut hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Numeric("non-finite Monte-Carlo sample".into()));
    }
    lo -= 1.0;
    hi += 1.0;
    let f = |b: f64| x.iter().map(|&v| loss.psi(v - b)).sum::<f64>() / x.len() as f64;
    let mut widen = 0;
    while !(f(lo) >= 0.0 && f(hi) <= 0.0) {
        widen += 1;
        if widen > 60 {
            return Err(Error::Numeric("robust location bracket could not be established".into()));
        }
        let w = hi - lo;
        lo -= w;
        hi += w;
    }
    for _ in 0..400 {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

struct RepTruth {
    mean: Vec<f64>,
    covariance: Option<Vec<f64>>,
}

/// One oracle replicate; `center_offset` shifts the centre used in the
/// covariance residuals away from `mu_r`.
fn oracle_rep(config: &SimConfig, grid: &Grid, loss: &Loss, opts: &TruthOptions, rep: usize, center_offset: f64) -> Result<RepTruth> {
    let g = grid.len();
    let s = opts.samples;
    let contaminate = opts.population == TruthPopulation::Contaminated && config.contamination_prob > 0.0;
    let alpha = if contaminate { config.contamination_prob } else { 0.0 };
    let mut rng = replicate_rng(opts.seed, stream_id(&[TRUTH_TAG, config.family.code(), prob_code(alpha), rep as u64]));
    let outlier = Normal::new(config.contamination_location, config.contamination_sd)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let noise = Normal::new(0.0, config.noise_sd).map_err(|e| Error::InvalidInput(e.to_string()))?;

    // column j holds sample curve j on the grid
    let mut x = DMatrix::<f64>::zeros(g, s);
    let mut scores = vec![0.0; config.basis_count];
    let phi: Vec<Vec<f64>> = (1..=config.basis_count).map(|k| grid.points().iter().map(|&t| basis(k, t)).collect()).collect();
    for j in 0..s {
        config.family.draw_scores(&mut scores, &mut rng);
        let mut col = x.column_mut(j);
        for gi in 0..g {
            let mut v: f64 = scores.iter().zip(&phi).map(|(z, p)| z * p[gi]).sum();
            if config.noise_sd > 0.0 {
                v += noise.sample(&mut rng);
            }
            if contaminate && rng.random::<f64>() < alpha {
                v = outlier.sample(&mut rng);
            }
            col[gi] = v;
        }
    }

    let symmetric = opts.exploit_symmetry && alpha == 0.0 && config.family.is_symmetric();
    let mean: Vec<f64> = if symmetric {
        vec![0.0; g]
    } else {
        (0..g)
            .into_par_iter()
            .map(|gi| {
                let row: Vec<f64> = x.row(gi).iter().copied().collect();
                robust_location(&row, loss)
            })
            .collect::<Result<_>>()?
    };

    let covariance = if opts.covariance {
        for j in 0..s {
            let mut col = x.column_mut(j);
            for gi in 0..g {
                col[gi] = loss.psi(col[gi] - mean[gi] - center_offset);
            }
        }
        let c = &x * x.transpose() / s as f64;
        let mut v = vec![0.0; g * g];
        for a in 0..g {
            for b in 0..g {
                v[a * g + b] = 0.5 * (c[(a, b)] + c[(b, a)]);
            }
        }
        Some(v)
    } else {
        None
    };
    Ok(RepTruth { mean, covariance })
}

fn mean_and_se(reps: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let r = reps.len();
    let len = reps[0].len();
    let mut mean = vec![0.0; len];
    let mut se = vec![0.0; len];
    for i in 0..len {
        let m = reps.iter().map(|v| v[i]).sum::<f64>() / r as f64;
        mean[i] = m;
        se[i] = if r >= 2 {
            let var = reps.iter().map(|v| (v[i] - m).powi(2)).sum::<f64>() / (r - 1) as f64;
            (var / r as f64).sqrt()
        } else {
            f64::NAN
        };
    }
    (mean, se)
}

fn check_truth_options(opts: &TruthOptions) -> Result<()> {
    if opts.samples < 10_000 {
        return Err(Error::InvalidInput(format!("truth oracle needs at least 10^4 samples, got {}", opts.samples)));
    }
    if opts.reps == 0 {
        return Err(Error::InvalidInput("truth oracle needs at least one replicate".into()));
    }
    Ok(())
}

fn oracle_with_offset(config: &SimConfig, grid: &Grid, loss: &Loss, opts: &TruthOptions, center_offset: f64) -> Result<TruthTables> {
    config.validate()?;
    loss.validate()?;
    check_truth_options(opts)?;
    let reps: Vec<RepTruth> = (0..opts.reps).map(|r| oracle_rep(config, grid, loss, opts, r, center_offset)).collect::<Result<_>>()?;
    let (mean, mean_se) = mean_and_se(&reps.iter().map(|r| r.mean.as_slice()).collect::<Vec<_>>());
    let (covariance, covariance_se) = if opts.covariance {
        let (c, se) = mean_and_se(&reps.iter().map(|r| r.covariance.as_deref().unwrap()).collect::<Vec<_>>());
        (Some(c), Some(se))
    } else {
        (None, None)
    };
    Ok(TruthTables {
        grid: grid.clone(),
        loss: *loss,
        mean,
        mean_se,
        covariance,
        covariance_se,
        samples: opts.samples,
        reps: opts.reps,
        seed: opts.seed,
    })
}

/// Ground-truth `mu_r` and `C_r` for the population of `config` (its `n`, `m`
/// and seed are ignored).
pub fn truth_oracle(config: &SimConfig, grid: &Grid, loss: &Loss, opts: &TruthOptions) -> Result<TruthTables> {
    oracle_with_offset(config, grid, loss, opts, 0.0)
}

/// `int (mu_hat - mu_r)^2` by the trapezoidal rule.
pub fn imse_mean(estimate: &MeanEstimate, truth: &TruthTables) -> Result<f64> {
    if estimate.grid != truth.grid {
        return Err(Error::Contract("estimate and truth are on different grids".into()));
    }
    let sq: Vec<f64> = estimate.values.iter().zip(&truth.mean).map(|(a, b)| (a - b).powi(2)).collect();
    Ok(truth.grid.integrate(&sq))
}

fn integrate_surface(grid: &Grid, values: &[f64]) -> f64 {
    let w = grid.trapezoid_weights();
    let g = w.len();
    (0..g).map(|i| w[i] * (0..g).map(|j| w[j] * values[i * g + j]).sum::<f64>()).sum()
}

/// `int int (C_hat - C_r)^2 / int int C_r^2`.
pub fn rel_imse_cov(surface: &CovarianceSurface, truth: &TruthTables) -> Result<f64> {
    if surface.grid != truth.grid {
        return Err(Error::Contract("surface and truth are on different grids".into()));
    }
    let c = truth
        .covariance
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("truth tables carry no covariance".into()))?;
    let num: Vec<f64> = surface.values.iter().zip(c).map(|(a, b)| (a - b).powi(2)).collect();
    let den: Vec<f64> = c.iter().map(|v| v * v).collect();
    let den = integrate_surface(&truth.grid, &den);
    if !(den > 0.0) {
        return Err(Error::Numeric("true covariance has zero norm".into()));
    }
    Ok(integrate_surface(&truth.grid, &num) / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableKind {
    Mean,
    Covariance,
}

impl FromStr for TableKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "1" => Ok(TableKind::Mean),
            "covariance" | "cov" | "3" => Ok(TableKind::Covariance),
            other => Err(Error::InvalidInput(format!("unknown table '{other}'"))),
        }
    }
}

/// Loss of one table row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellLoss {
    Fixed(Loss),
    /// Locally smoothed absolute loss with cross-validated `kappa`.
    TunedKappa,
}

impl CellLoss {
    pub fn label(&self) -> String {
        match self {
            CellLoss::TunedKappa => "rho1-tuned".into(),
            CellLoss::Fixed(l) => match l.family {
                LossFamily::Square => "rho0".into(),
                LossFamily::LocalSmoothAbs => format!("rho1:{}", l.kappa),
                LossFamily::LogCosh => "rho2".into(),
                LossFamily::ArctanIntegral => "rho3".into(),
            },
        }
    }
}

impl FromStr for CellLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "rho1-tuned" || s == "rho1:tuned" || s == "tuned" {
            return Ok(CellLoss::TunedKappa);
        }
        if let Some(k) = s.strip_prefix("rho1:") {
            let kappa: f64 = k.parse().map_err(|_| Error::InvalidInput(format!("bad kappa '{k}'")))?;
            return Ok(CellLoss::Fixed(Loss::local_smooth_abs(kappa)?));
        }
        let family: LossFamily = s.parse()?;
        Ok(CellLoss::Fixed(Loss::new(family, 1.0)?))
    }
}

/// One `(loss, population, n, m)` entry of an error table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub loss: CellLoss,
    pub family: ScoreFamily,
    pub contamination: f64,
    pub n: usize,
    pub m: usize,
}

impl Cell {
    /// Population label, e.g. `normal` or `beta20` for 20% contamination.
    pub fn population_label(&self) -> String {
        if self.contamination > 0.0 {
            format!("{}{}", self.family.short_name(), (self.contamination * 100.0).round() as u64)
        } else {
            self.family.short_name().to_string()
        }
    }

    pub fn id(&self) -> String {
        format!("{},{},{},{}", self.loss.label(), self.population_label(), self.n, self.m)
    }
}

impl FromStr for Cell {
    type Err = Error;

    /// `loss,population,n,m`, e.g. `rho0,normal,100,5` or `rho1-tuned,beta20,200,10`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::InvalidInput(format!("cell '{s}' must be loss,population,n,m")));
        }
        let loss: CellLoss = parts[0].parse()?;
        let pop = parts[1].to_ascii_lowercase();
        let digits = pop.trim_start_matches(|c: char| !c.is_ascii_digit());
        let name = &pop[..pop.len() - digits.len()];
        let family: ScoreFamily = name.parse()?;
        let contamination = if digits.is_empty() {
            0.0
        } else {
            digits.parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad population '{pop}'")))? / 100.0
        };
        let n = parts[2].parse().map_err(|_| Error::InvalidInput(format!("bad n '{}'", parts[2])))?;
        let m = parts[3].parse().map_err(|_| Error::InvalidInput(format!("bad m '{}'", parts[3])))?;
        Ok(Cell { loss, family, contamination, n, m })
    }
}

/// The cells of the published tables for the given losses.
pub fn standard_cells(losses: &[CellLoss]) -> Vec<Cell> {
    let pops = [
        (ScoreFamily::Normal, 0.0),
        (ScoreFamily::StudentT, 0.0),
        (ScoreFamily::SymmetricLogNormal, 0.0),
        (ScoreFamily::CenteredBeta, 0.1),
        (ScoreFamily::CenteredBeta, 0.2),
    ];
    let mut cells = Vec::new();
    for &loss in losses {
        for (n, m) in [(100, 5), (100, 10), (200, 5), (200, 10)] {
            for &(family, contamination) in &pops {
                cells.push(Cell { loss, family, contamination, n, m });
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReproduceOptions {
    pub runs: usize,
    pub seed: u64,
    pub basis_count: usize,
    pub grid_size: usize,
    pub folds: usize,
    pub kernel: Kernel,
    pub kappas: Vec<f64>,
    pub bandwidth_count: usize,
    /// Explicit bandwidth candidates; data-driven defaults when `None`.
    pub mean_bandwidths: Option<Vec<f64>>,
    pub cov_bandwidths: Option<Vec<f64>>,
    pub moment_mode: MomentMode,
    pub truth_samples: usize,
    pub truth_reps: usize,
    pub truth_population: TruthPopulation,
}

impl Default for ReproduceOptions {
    fn default() -> Self {
        ReproduceOptions {
            runs: 100,
            seed: 0,
            basis_count: 2,
            grid_size: 101,
            folds: 2,
            kernel: Kernel::Tricube,
            kappas: DEFAULT_KAPPAS.to_vec(),
            bandwidth_count: 8,
            mean_bandwidths: None,
            cov_bandwidths: None,
            moment_mode: MomentMode::Analytic,
            truth_samples: 100_000,
            truth_reps: 2,
            truth_population: TruthPopulation::Clean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: Cell,
    pub mean: f64,
    pub se: f64,
    /// Successful runs.
    pub runs: usize,
    /// Runs whose estimation failed, with the first error message.
    pub excluded: usize,
    pub first_error: Option<String>,
    /// Per-run metric, `None` for excluded runs.
    pub metrics: Vec<Option<f64>>,
    /// Per-run selected `kappa` for tuned cells.
    pub kappas: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub table: TableKind,
    pub rows: Vec<CellReport>,
}

impl Report {
    pub fn row(&self, id: &str) -> Option<&CellReport> {
        self.rows.iter().find(|r| r.cell.id() == id)
    }

    /// `cell,loss,population,n,m,mean,se,runs,excluded`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,loss,population,n,m,mean,se,runs,excluded\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "\"{}\",{},{},{},{},{},{},{},{}",
                r.cell.id(),
                r.cell.loss.label(),
                r.cell.population_label(),
                r.cell.n,
                r.cell.m,
                r.mean,
                r.se,
                r.runs,
                r.excluded
            );
        }
        out
    }

    /// Rows per loss and `(n, m)`, one column per population, entries `mean(se)`.
    pub fn to_text(&self) -> String {
        let mut pops: Vec<String> = Vec::new();
        let mut rows: Vec<(String, usize, usize)> = Vec::new();
        let mut entries: BTreeMap<(String, usize, usize, String), String> = BTreeMap::new();
        for r in &self.rows {
            let pop = r.cell.population_label();
            if !pops.contains(&pop) {
                pops.push(pop.clone());
            }
            let key = (r.cell.loss.label(), r.cell.n, r.cell.m);
            if !rows.contains(&key) {
                rows.push(key.clone());
            }
            entries.insert((key.0, key.1, key.2, pop), format!("{:.4}({:.4})", r.mean, r.se));
        }
        let widths: Vec<usize> = pops
            .iter()
            .map(|p| {
                rows.iter()
                    .filter_map(|(l, n, m)| entries.get(&(l.clone(), *n, *m, p.clone())))
                    .map(String::len)
                    .chain(std::iter::once(p.len()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let lw = rows.iter().map(|r| r.0.len()).chain(std::iter::once(4)).max().unwrap_or(4);
        let mut out = String::new();
        let _ = write!(out, "{:<lw$}  {:>4}  {:>3}", "loss", "n", "m");
        for (p, w) in pops.iter().zip(&widths) {
            let _ = write!(out, "  {p:>w$}");
        }
        out.push('\n');
        for (l, n, m) in &rows {
            let _ = write!(out, "{l:<lw$}  {n:>4}  {m:>3}");
            for (p, w) in pops.iter().zip(&widths) {
                let e = entries.get(&(l.clone(), *n, *m, p.clone())).map(String::as_str).unwrap_or("-");
                let _ = write!(out, "  {e:>w$}");
            }
            out.push('\n');
        }
        out
    }
}

type TruthKey = (ScoreFamily, u64, LossFamily, u64);

fn truth_key(cell: &Cell, loss: &Loss, population: TruthPopulation) -> TruthKey {
    let alpha = if population == TruthPopulation::Clean { 0.0 } else { cell.contamination };
    (cell.family, prob_code(alpha), loss.family, loss.kappa.to_bits())
}

fn cell_losses(cell: &Cell, kappas: &[f64]) -> Result<Vec<Loss>> {
    match cell.loss {
        CellLoss::Fixed(l) => Ok(vec![l]),
        CellLoss::TunedKappa => kappas.iter().map(|&k| Loss::local_smooth_abs(k)).collect(),
    }
}

fn sim_config(cell: &Cell, opts: &ReproduceOptions) -> SimConfig {
    SimConfig {
        basis_count: opts.basis_count,
        family: cell.family,
        contamination_prob: cell.contamination,
        n: cell.n,
        m: cell.m,
        ..Default::default()
    }
}

/// Stream of the dataset for one run; independent of the loss so all losses
/// of a population see the same datasets.
fn dataset_stream(cell: &Cell, run: usize) -> u64 {
    stream_id(&[cell.family.code(), prob_code(cell.contamination), cell.n as u64, cell.m as u64, run as u64])
}

/// Error tables over repeated simulated datasets. Every run goes through the
/// full cross-validated pipeline; failed runs are counted, not dropped silently.
pub fn reproduce_table(table: TableKind, cells: &[Cell], opts: &ReproduceOptions) -> Result<Report> {
    if opts.runs < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 runs, got {}", opts.runs)));
    }
    if cells.is_empty() {
        return Err(Error::InvalidInput("no cells selected".into()));
    }
    let grid = Grid::uniform(opts.grid_size)?;
    let truth_opts = TruthOptions {
        samples: opts.truth_samples,
        reps: opts.truth_reps,
        seed: opts.seed,
        population: opts.truth_population,
        covariance: table == TableKind::Covariance,
        exploit_symmetry: true,
    };
    let mut truths: BTreeMap<TruthKey, TruthTables> = BTreeMap::new();
    for cell in cells {
        for loss in cell_losses(cell, &opts.kappas)? {
            let key = truth_key(cell, &loss, opts.truth_population);
            if let std::collections::btree_map::Entry::Vacant(slot) = truths.entry(key) {
                slot.insert(truth_oracle(&sim_config(cell, opts), &grid, &loss, &truth_opts)?);
            }
        }
    }

    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let sim = sim_config(cell, opts);
        let outcomes: Vec<Result<(f64, Option<f64>)>> = (0..opts.runs)
            .into_par_iter()
            .map(|run| {
                let stream = dataset_stream(cell, run);
                let data = sample_dataset_with(&sim, &mut replicate_rng(opts.seed, stream))?;
                let fit_cfg = FitConfig {
                    loss: match cell.loss {
                        CellLoss::Fixed(l) => LossChoice::Fixed(l),
                        CellLoss::TunedKappa => LossChoice::TunedKappa(opts.kappas.clone()),
                    },
                    smoother: SmootherOptions { kernel: opts.kernel, ..Default::default() },
                    grid_size: opts.grid_size,
                    folds: opts.folds,
                    seed: splitmix(stream),
                    bandwidth_count: opts.bandwidth_count,
                    mean_bandwidths: opts.mean_bandwidths.clone(),
                    cov_bandwidths: opts.cov_bandwidths.clone(),
                    moment_mode: opts.moment_mode,
                    ..Default::default()
                };
                let mean = fit_mean(&data, &fit_cfg)?;
                let truth = &truths[&truth_key(cell, &mean.loss, opts.truth_population)];
                let kappa = mean.kappa.as_ref().map(|k| k.selected);
                let metric = match table {
                    TableKind::Mean => imse_mean(&mean.mean, truth)?,
                    TableKind::Covariance => rel_imse_cov(&fit_covariance(&data, &mean, &fit_cfg)?.surface, truth)?,
                };
                Ok((metric, kappa))
            })
            .collect();
        let metrics: Vec<Option<f64>> = outcomes.iter().map(|o| o.as_ref().ok().map(|v| v.0)).collect();
        let kappas: Vec<Option<f64>> = outcomes.iter().map(|o| o.as_ref().ok().and_then(|v| v.1)).collect();
        let first_error = outcomes.iter().find_map(|o| o.as_ref().err().map(|e| e.to_string()));
        let ok: Vec<f64> = metrics.iter().flatten().copied().collect();
        let runs = ok.len();
        let mean = if runs > 0 { ok.iter().sum::<f64>() / runs as f64 } else { f64::NAN };
        let se = if runs >= 2 {
            (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs - 1) as f64 / runs as f64).sqrt()
        } else {
            f64::NAN
        };
        rows.push(CellReport { cell: *cell, mean, se, runs, excluded: opts.runs - runs, first_error, metrics, kappas });
    }
    Ok(Report { table, rows })
}
