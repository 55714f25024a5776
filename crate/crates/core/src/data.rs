//! Discretely observed functional data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observations of one curve: `(time, value)` pairs in recording order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Subject {
    pub fn new(id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Self {
        Subject { id: id.into(), times, values }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.values.iter().copied())
    }
}

/// How per-observation weights `gamma_i` are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubjectWeighting {
    /// `gamma_i = 1 / (n m_i)`: each subject contributes equally.
    #[default]
    EqualSubject,
    /// `gamma_i = 1 / N`: each observation contributes equally.
    EqualObservation,
}

/// `n` subjects observed at times in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalDataset {
    subjects: Vec<Subject>,
}

impl FunctionalDataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in &subjects {
            if s.times.len() != s.values.len() {
                return Err(Error::InvalidInput(format!(
                    "subject {}: {} times but {} values",
                    s.id,
                    s.times.len(),
                    s.values.len()
                )));
            }
            if s.is_empty() {
                return Err(Error::InvalidInput(format!("subject {} has no observations", s.id)));
            }
            for (t, x) in s.iter() {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::InvalidInput(format!("subject {}: time {t} outside [0, 1]", s.id)));
                }
                if !x.is_finite() {
                    return Err(Error::InvalidInput(format!("subject {}: non-finite value {x}", s.id)));
                }
            }
        }
        Ok(FunctionalDataset { subjects })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.subjects.iter().map(Subject::len).collect()
    }

    /// Subset by subject index, preserving the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let subjects = indices.iter().map(|&i| self.subjects[i].clone()).collect();
        FunctionalDataset::new(subjects)
    }

    /// Per-subject weight for each subject.
    pub fn subject_weights(&self, weighting: SubjectWeighting) -> Vec<f64> {
        let n = self.n() as f64;
        let total = self.total_observations() as f64;
        self.subjects
            .iter()
            .map(|s| match weighting {
                SubjectWeighting::EqualSubject => 1.0 / (n * s.len() as f64),
                SubjectWeighting::EqualObservation => 1.0 / total,
            })
            .collect()
    }

    /// A dataset with `c` added to every value.
    pub fn shifted(&self, c: f64) -> Self {
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                id: s.id.clone(),
                times: s.times.clone(),
                values: s.values.iter().map(|x| x + c).collect(),
            })
            .collect();
        FunctionalDataset { subjects }
    }

    /// Median spacing between consecutive pooled observation times.
    pub fn median_time_gap(&self) -> f64 {
        let mut times: Vec<f64> = self.subjects.iter().flat_map(|s| s.times.iter().copied()).collect();
        times.sort_by(f64::total_cmp);
        let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        if gaps.is_empty() {
            return 0.0;
        }
        gaps.sort_by(f64::total_cmp);
        let k = gaps.len();
        if k % 2 == 1 {
            gaps[k / 2]
        } else {
            0.5 * (gaps[k / 2 - 1] + gaps[k / 2])
        }
    }
}

/// Pooled observations sorted by time, each carrying its subject weight.
#[derive(Debug, Clone)]
pub(crate) struct Pooled {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl Pooled {
    pub fn new(data: &FunctionalDataset, weighting: SubjectWeighting) -> Self {
        let gam = data.subject_weights(weighting);
        let mut obs: Vec<(f64, f64, f64)> = data
            .subjects()
            .iter()
            .zip(&gam)
            .flat_map(|(s, &g)| s.iter().map(move |(t, x)| (t, x, g)))
            .collect();
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Pooled {
            times: obs.iter().map(|o| o.0).collect(),
            values: obs.iter().map(|o| o.1).collect(),
            gammas: obs.iter().map(|o| o.2).collect(),
        }
    }

    /// Index range of observations with time in `[lo, hi]`.
    pub fn window(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = self.times.partition_point(|&t| t < lo);
        let b = self.times.partition_point(|&t| t <= hi);
        a..b.max(a)
    }
}

/// Seeded assignment of `n` subjects to `k` folds with sizes differing by at most one.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidInput(format!("{n} subjects cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

/// Training and validation subject indices for fold `k`.
pub fn fold_split(folds: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    (0..folds.len()).partition(|&i| folds[i] != k)
}
