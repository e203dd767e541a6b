//! Probabilistic two-way orthogonal partial least squares (PO2PLS).
//!
//! Two data blocks `x` (p features) and `y` (q features) are modelled as
//!
//! ```text
//! x = t Wᵀ + t⊥ W⊥ᵀ + e
//! y = u Cᵀ + u⊥ C⊥ᵀ + f
//! u = t B + h
//! ```
//!
//! with diagonal latent covariances, semi-orthogonal loadings and isotropic
//! noise. The crate fits the model by maximum likelihood (ECM), tests
//! `H₀: B = 0`, predicts `y` from `x`, and simulates data and studies.
//!
//! All computation works in the latent dimension `k = 2r + r_x + r_y`; the
//! `(p+q)×(p+q)` covariance is never formed.

// `!(a > b)` comparisons deliberately treat NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditioning;
pub mod data;
pub mod em;
pub mod error;
pub mod inference;
pub mod io;
mod linalg;
pub mod model;
pub mod seeds;
pub mod simulation;

pub use conditioning::{
    latent_moments, log_likelihood, orth, predict_scores, predict_scores_from_x, predict_y_from_x,
    LatentMoments, Scores,
};
pub use data::DataPair;
pub use em::{em_step, fit, fit_from, initialize, FitConfig, FitResult, InitStrategy};
pub use error::{Error, Result};
pub use inference::{
    fisher_info_b, global_test, normal_two_sided_p, ResampleConfig, TestMethod, TestResult,
};
pub use io::{ModelFile, Preprocessing, Scree};
pub use model::{
    implied_covariance, sample, validate_and_normalize, validate_and_normalize_strict,
    LowRankCovariance, ModelParams, RankSpec, SampledData,
};
pub use simulation::{gen_scenario, pls_svd_baseline, rmsep, tpr_top_features, Scenario, ScenarioConfig};
