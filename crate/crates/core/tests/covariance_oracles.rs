use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use robfpca::covariance::{raw_covariances, smooth_covariance, MomentMode, RawCovariances};
use robfpca::pipeline::{fit, fit_covariance, fit_mean, split_sample_fit, FitConfig, LossChoice};
use robfpca::simulation::{sample_dataset, ScoreFamily, SimConfig};
use robfpca::smoothing::{cv_bandwidth_mean, estimate_mean_curve, SmootherOptions};
use robfpca::{FunctionalDataset, Grid, Kernel, Loss, Subject};

/// Local-linear surface by weighted least squares with the empirical design
/// moments, solved through the 3x3 normal equations at every node.
fn least_squares_surface(raw: &RawCovariances, grid: &Grid, h: f64, kernel: Kernel) -> Vec<f64> {
    let v = raw.subject_weights();
    let recs = raw.records();
    let g = grid.len();
    let mut out = vec![0.0; g * g];
    for i in 0..g {
        for j in 0..g {
            let (s, t) = (grid.points()[i], grid.points()[j]);
            let mut a = Matrix3::<f64>::zeros();
            let mut b = Vector3::<f64>::zeros();
            for r in &recs {
                let w = v[r.subject] * kernel.scaled(r.t1 - s, h) * kernel.scaled(r.t2 - t, h);
                if w == 0.0 {
                    continue;
                }
                let x = Vector3::new(1.0, r.t1 - s, r.t2 - t);
                a += w * x * x.transpose();
                b += w * r.value * x;
            }
            out[i * g + j] = a.lu().solve(&b).map(|beta| beta[0]).unwrap_or(f64::NAN);
        }
    }
    for i in 0..g {
        for j in 0..i {
            let m = 0.5 * (out[i * g + j] + out[j * g + i]);
            out[i * g + j] = m;
            out[j * g + i] = m;
        }
    }
    out
}

fn least_squares_gap(n: usize, seed: u64) -> f64 {
    let data = sample_dataset(&SimConfig { n, m: 10, seed, ..Default::default() }).unwrap();
    let grid = Grid::uniform(21).unwrap();
    let h = 0.2;
    let mean = estimate_mean_curve(&data, &grid, 0.3, SmootherOptions::default(), &Loss::SQUARE).unwrap();
    let raw = raw_covariances(&data, &mean, &Loss::SQUARE).unwrap();
    let surface = smooth_covariance(&raw, &grid, h, Kernel::Tricube, MomentMode::Analytic).unwrap();
    let oracle = least_squares_surface(&raw, &grid, h, Kernel::Tricube);
    let diff = surface.values.iter().zip(&oracle).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    diff / surface.sup_norm()
}

// The closed form uses expected design moments, so the gap to the empirical
// least-squares fit is sampling noise of order 1/sqrt(n).
#[test]
fn square_loss_surface_matches_least_squares_oracle() {
    let small = least_squares_gap(200, 11);
    let large = least_squares_gap(3200, 11);
    assert!(small <= 0.15, "n=200 relative gap {small}");
    assert!(large <= 0.05, "n=3200 relative gap {large}");
    assert!(large < small);
}

#[test]
fn independent_values_give_a_flat_surface() {
    // every observation is an independent draw, so X(s) and X(t) are independent for s != t
    let n = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let subjects = (0..n)
        .map(|i| {
            let times: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let values = (0..5).map(|_| normal.sample(&mut rng)).collect();
            Subject::new(i.to_string(), times, values)
        })
        .collect();
    let data = FunctionalDataset::new(subjects).unwrap();
    let grid = Grid::uniform(51).unwrap();
    let loss = Loss::LOG_COSH;
    let mean = estimate_mean_curve(&data, &grid, 0.2, SmootherOptions::default(), &loss).unwrap();
    let raw = raw_covariances(&data, &mean, &loss).unwrap();
    let surface = smooth_covariance(&raw, &grid, 0.1, Kernel::Tricube, MomentMode::Analytic).unwrap();
    let bound = 4.0 / (n as f64).sqrt();
    let probes = [(0.1, 0.5), (0.2, 0.8), (0.3, 0.9), (0.4, 0.1), (0.5, 0.9), (0.6, 0.2), (0.7, 0.3), (0.8, 0.4), (0.9, 0.5), (0.25, 0.75)];
    for (s, t) in probes {
        let c = surface.eval(s, t);
        assert!(c.abs() <= bound, "C({s}, {t}) = {c} exceeds {bound}");
    }
}

#[test]
fn bounded_losses_keep_the_surface_bounded() {
    let data = sample_dataset(&SimConfig { family: ScoreFamily::SymmetricLogNormal, n: 100, m: 5, seed: 3, ..Default::default() }).unwrap();
    let grid = Grid::uniform(41).unwrap();
    for loss in [Loss::LOG_COSH, Loss::ARCTAN_INTEGRAL] {
        let mean = estimate_mean_curve(&data, &grid, 0.3, SmootherOptions::default(), &loss).unwrap();
        let raw = raw_covariances(&data, &mean, &loss).unwrap();
        for h in [0.1, 0.2, 0.3] {
            let s = smooth_covariance(&raw, &grid, h, Kernel::Tricube, MomentMode::Analytic).unwrap();
            assert!(s.sup_norm() <= 2.0, "{loss} h={h}: {}", s.sup_norm());
            assert!(s.is_symmetric());
        }
    }
}

#[test]
fn split_and_full_fits_agree_within_sampling_error() {
    let cfg = FitConfig {
        loss: LossChoice::Fixed(Loss::LOG_COSH),
        grid_size: 31,
        mean_bandwidths: Some(vec![0.2]),
        cov_bandwidths: Some(vec![0.2]),
        ..Default::default()
    };
    let reps = 10;
    let mut full = Vec::new();
    let mut diffs = Vec::new();
    for r in 0..reps {
        let data = sample_dataset(&SimConfig { n: 400, m: 5, seed: 100 + r, ..Default::default() }).unwrap();
        let mean = fit_mean(&data, &cfg).unwrap();
        let a = fit_covariance(&data, &mean, &cfg).unwrap().surface;
        let (_, split) = split_sample_fit(&data, &cfg).unwrap();
        diffs.push(a.values.iter().zip(&split.surface.values).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())));
        full.push(a.values);
    }
    // Monte-Carlo sd of the full-sample estimator, largest over the lattice
    let len = full[0].len();
    let sd = (0..len)
        .map(|k| {
            let mu = full.iter().map(|v| v[k]).sum::<f64>() / reps as f64;
            (full.iter().map(|v| (v[k] - mu).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
        })
        .fold(0.0f64, f64::max);
    let avg_diff = diffs.iter().sum::<f64>() / reps as f64;
    assert!(avg_diff <= 2.0 * sd, "split/full sup difference {avg_diff} vs sd {sd}");
}

#[test]
fn tuned_bandwidth_beats_oversmoothing_on_a_curved_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let subjects = (0..200)
        .map(|i| {
            let times: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            let values = times.iter().map(|&t| (2.0 * std::f64::consts::PI * t).sin() + noise.sample(&mut rng)).collect();
            Subject::new(i.to_string(), times, values)
        })
        .collect();
    let data = FunctionalDataset::new(subjects).unwrap();
    let grid = Grid::uniform(51).unwrap();
    let sel = cv_bandwidth_mean(&data, &[0.05, 0.1, 0.5], 2, 1, &grid, SmootherOptions::default(), &Loss::LOG_COSH).unwrap();
    let score = |h: f64| sel.scores[sel.candidates.iter().position(|&c| c == h).unwrap()].unwrap();
    assert!(sel.selected < 0.5);
    assert!(score(sel.selected) < score(0.5));
}

#[test]
fn fitted_eigenfunctions_are_orthonormal_and_sorted() {
    for (family, loss) in [
        (ScoreFamily::Normal, LossChoice::Fixed(Loss::SQUARE)),
        (ScoreFamily::StudentT, LossChoice::Fixed(Loss::LOG_COSH)),
        (ScoreFamily::CenteredBeta, LossChoice::TunedKappa(vec![0.01, 1.0])),
    ] {
        let data = sample_dataset(&SimConfig { family, n: 80, m: 6, seed: 5, ..Default::default() }).unwrap();
        let res = fit(&data, &FitConfig { loss, grid_size: 51, ..Default::default() }).unwrap();
        let gram = res.eigen.gram();
        for (i, row) in gram.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((v - target).abs() < 1e-8, "{family}: gram[{i}][{j}] = {v}");
            }
        }
        assert!(res.eigen.values.windows(2).all(|w| w[0] >= w[1]));
        assert!(res.eigen.values.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn fitted_mean_is_translation_equivariant() {
    let data = sample_dataset(&SimConfig { family: ScoreFamily::StudentT, n: 60, m: 5, seed: 9, ..Default::default() }).unwrap();
    let cfg = FitConfig { loss: LossChoice::Fixed(Loss::ARCTAN_INTEGRAL), grid_size: 41, ..Default::default() };
    let a = fit_mean(&data, &cfg).unwrap();
    let b = fit_mean(&data.shifted(3.5), &cfg).unwrap();
    assert_eq!(a.bandwidth.selected, b.bandwidth.selected);
    for (x, y) in a.mean.values.iter().zip(&b.mean.values) {
        assert!((y - x - 3.5).abs() < 1e-6);
    }
}
