//! Python module `robfpca`.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use robfpca::fpca::{fraction_of_variance, reconstruct};
use robfpca::pipeline::DEFAULT_KAPPAS;
use robfpca::simulation::{sample_dataset, ScoreFamily, SimConfig};
use robfpca::{ComponentRule, FitConfig, FunctionalDataset, LossChoice, LossFamily, SmootherOptions, Subject};

fn to_py(e: robfpca::Error) -> PyErr {
    if e.is_input_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyArithmeticError::new_err(e.to_string())
    }
}

/// A robust loss: "square", "local-smooth-abs", "log-cosh" or "arctan-integral".
#[pyclass(name = "Loss", frozen)]
#[derive(Clone)]
struct PyLoss {
    inner: robfpca::Loss,
}

#[pymethods]
impl PyLoss {
    #[new]
    #[pyo3(signature = (family, kappa = 1.0))]
    fn new(family: &str, kappa: f64) -> PyResult<Self> {
        let family: LossFamily = family.parse().map_err(to_py)?;
        Ok(PyLoss { inner: robfpca::Loss::new(family, kappa).map_err(to_py)? })
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family.name()
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa
    }

    fn rho(&self, x: f64) -> f64 {
        self.inner.rho(x)
    }

    fn psi(&self, x: f64) -> f64 {
        self.inner.psi(x)
    }

    /// Returns `(value, clamped)`.
    fn psi_inverse(&self, y: f64) -> (f64, bool) {
        let r = self.inner.psi_inverse(y);
        (r.value, r.clamped)
    }

    fn __repr__(&self) -> String {
        format!("Loss('{}', kappa={})", self.inner.family, self.inner.kappa)
    }
}

#[pyclass(name = "Dataset", frozen)]
#[derive(Clone)]
struct PyDataset {
    inner: FunctionalDataset,
}

#[pymethods]
impl PyDataset {
    /// Long-format rows; subjects are grouped by id in order of first appearance.
    #[new]
    fn new(subject_ids: Vec<String>, times: Vec<f64>, values: Vec<f64>) -> PyResult<Self> {
        if subject_ids.len() != times.len() || times.len() != values.len() {
            return Err(PyValueError::new_err("subject_ids, times and values must have equal length"));
        }
        let mut subjects: Vec<Subject> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for ((id, t), x) in subject_ids.into_iter().zip(times).zip(values) {
            let i = *index.entry(id.clone()).or_insert_with(|| {
                subjects.push(Subject::new(id, Vec::new(), Vec::new()));
                subjects.len() - 1
            });
            subjects[i].times.push(t);
            subjects[i].values.push(x);
        }
        Ok(PyDataset { inner: FunctionalDataset::new(subjects).map_err(to_py)? })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn total_observations(&self) -> usize {
        self.inner.total_observations()
    }

    #[getter]
    fn subject_ids(&self) -> Vec<String> {
        self.inner.subjects().iter().map(|s| s.id.clone()).collect()
    }

    /// `(subject_ids, times, values)` in long format.
    fn to_long(&self) -> (Vec<String>, Vec<f64>, Vec<f64>) {
        let mut ids = Vec::new();
        let mut ts = Vec::new();
        let mut xs = Vec::new();
        for s in self.inner.subjects() {
            for (t, x) in s.iter() {
                ids.push(s.id.clone());
                ts.push(t);
                xs.push(x);
            }
        }
        (ids, ts, xs)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }
}

#[pyclass(name = "FitResult", frozen)]
struct PyFitResult {
    inner: robfpca::FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.inner.mean.mean.grid.points().to_vec()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean.mean.values.clone()
    }

    /// Row-major `G x G` surface.
    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        self.inner.covariance.surface.values.chunks(self.inner.covariance.surface.size()).map(<[f64]>::to_vec).collect()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigen.values.clone()
    }

    #[getter]
    fn eigenfunctions(&self) -> Vec<Vec<f64>> {
        self.inner.eigen.functions.clone()
    }

    /// `(per-component, cumulative)` fraction of variance.
    #[getter]
    fn fraction_of_variance(&self) -> (Vec<f64>, Vec<f64>) {
        fraction_of_variance(&self.inner.eigen)
    }

    #[getter]
    fn subject_ids(&self) -> Vec<String> {
        self.inner.scores.ids.clone()
    }

    #[getter]
    fn scores(&self) -> Vec<Vec<f64>> {
        self.inner.scores.scores.clone()
    }

    #[getter]
    fn loss(&self) -> PyLoss {
        PyLoss { inner: self.inner.mean.loss }
    }

    #[getter]
    fn mean_bandwidth(&self) -> f64 {
        self.inner.mean.bandwidth.selected
    }

    #[getter]
    fn covariance_bandwidth(&self) -> f64 {
        self.inner.covariance.bandwidth.selected
    }

    /// Selected kappa when it was cross-validated.
    #[getter]
    fn kappa(&self) -> Option<f64> {
        self.inner.mean.kappa.as_ref().map(|k| k.selected)
    }

    /// Curve of subject `index` at `times`; returns `(values, clamped_count)`.
    fn reconstruct(&self, index: usize, times: Vec<f64>) -> PyResult<(Vec<f64>, usize)> {
        let scores = self.inner.scores.scores.get(index).ok_or_else(|| PyValueError::new_err("subject index out of range"))?;
        let r = reconstruct(&self.inner.mean.mean, &self.inner.eigen, scores, &self.inner.mean.loss, &times).map_err(to_py)?;
        Ok((r.values, r.clamped))
    }
}

/// Full robust FPCA. `loss="tuned"` cross-validates kappa over `kappas`.
#[pyfunction]
#[pyo3(signature = (data, loss = "log-cosh", kappa = 1.0, kappas = None, grid_size = 101, folds = 2, seed = 0,
                    kernel = "tricube", split_sample = false, components = None, fve = 0.95))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    data: &PyDataset,
    loss: &str,
    kappa: f64,
    kappas: Option<Vec<f64>>,
    grid_size: usize,
    folds: usize,
    seed: u64,
    kernel: &str,
    split_sample: bool,
    components: Option<usize>,
    fve: f64,
) -> PyResult<PyFitResult> {
    let loss = if matches!(loss, "tuned" | "rho1-tuned") {
        LossChoice::TunedKappa(kappas.unwrap_or_else(|| DEFAULT_KAPPAS.to_vec()))
    } else {
        let family: LossFamily = loss.parse().map_err(to_py)?;
        LossChoice::Fixed(robfpca::Loss::new(family, kappa).map_err(to_py)?)
    };
    let config = FitConfig {
        loss,
        smoother: SmootherOptions { kernel: kernel.parse().map_err(to_py)?, ..Default::default() },
        grid_size,
        folds,
        seed,
        split_sample,
        components: components.map(ComponentRule::Fixed).unwrap_or(ComponentRule::Fve(fve)),
        ..Default::default()
    };
    let inner = py.allow_threads(|| robfpca::fit(&data.inner, &config)).map_err(to_py)?;
    Ok(PyFitResult { inner })
}

/// Curves `sum_k zeta_k phi_k` observed at uniform random times.
#[pyfunction]
#[pyo3(signature = (family = "normal", n = 100, m = 5, contamination = 0.0, seed = 0, basis_count = 2, noise_sd = 0.0))]
fn simulate(family: &str, n: usize, m: usize, contamination: f64, seed: u64, basis_count: usize, noise_sd: f64) -> PyResult<PyDataset> {
    let family: ScoreFamily = family.parse().map_err(to_py)?;
    let cfg = SimConfig { family, n, m, contamination_prob: contamination, seed, basis_count, noise_sd, ..Default::default() };
    Ok(PyDataset { inner: sample_dataset(&cfg).map_err(to_py)? })
}

/// Local extension weights at `t`: returns `(times, combined_weights)`.
#[pyfunction]
fn local_weights(data: &PyDataset, t: f64, h: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let lw = robfpca::smoothing::local_weights(&data.inner, t, h, SmootherOptions::default()).map_err(to_py)?;
    let w = lw.combined();
    Ok((lw.times, w))
}

#[pymodule]
#[pyo3(name = "robfpca")]
fn robfpca_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLoss>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(local_weights, m)?)?;
    Ok(())
}
