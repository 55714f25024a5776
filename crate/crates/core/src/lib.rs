//! Robust functional principal component analysis for sparse and dense
//! functional data.
//!
//! The mean is a robust local-linear M-estimator, the covariance a closed-form
//! local-linear smoother of products of rescaled residuals `psi(X - mu)`, and
//! the principal components come from the eigen-decomposition of that surface.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod covariance;
pub mod data;
pub mod error;
pub mod fpca;
pub mod grid;
pub mod kernel;
pub mod loss;
pub mod pipeline;
pub mod simulation;
pub mod smoothing;

pub use covariance::{CovarianceSurface, MomentMode, RawCovariances};
pub use data::{FunctionalDataset, Subject, SubjectWeighting};
pub use error::{Error, Result};
pub use fpca::{ComponentRule, EigenSystem, ScoreMatrix};
pub use grid::Grid;
pub use kernel::Kernel;
pub use loss::{Loss, LossFamily};
pub use pipeline::{fit, FitConfig, FitResult, LossChoice};
pub use smoothing::{MeanEstimate, SmootherOptions};
