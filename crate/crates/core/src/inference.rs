//! Global test of `H₀: B = 0`.
//!
//! The asymptotic route uses a per-component Wald statistic `T_k = B̂_k/SE_k`
//! with the information for `B` taken from the complete-data linear model
//! `u = tB + h`, corrected by the conditional variance of its score. The
//! resampling routes (parametric bootstrap under `B = 0`, row bootstrap,
//! row permutation of `Y`) refit the model from a fresh start per replicate.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::conditioning::LatentMoments;
use crate::data::DataPair;
use crate::em::{fit, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::{sample_with_rng, ModelParams, RankSpec};
use crate::seeds::derive_seed;

/// Relative floor on `σ̂²_h` (against `σ̂²_u`) before inversion.
pub const SIGMA_H_FLOOR: f64 = 1e-8;
/// Fraction of failed refits tolerated by the resampling methods.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    Asymptotic,
    ParamBootstrap,
    NonparamBootstrap,
    Permutation,
}

impl TestMethod {
    pub const ALL: [TestMethod; 4] = [
        TestMethod::Asymptotic,
        TestMethod::ParamBootstrap,
        TestMethod::NonparamBootstrap,
        TestMethod::Permutation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TestMethod::Asymptotic => "asymptotic",
            TestMethod::ParamBootstrap => "param-bootstrap",
            TestMethod::NonparamBootstrap => "nonparam-bootstrap",
            TestMethod::Permutation => "permutation",
        }
    }

    /// Default number of resamples (bootstrap 250, permutation 500).
    pub fn default_resamples(&self) -> usize {
        match self {
            TestMethod::Asymptotic => 0,
            TestMethod::ParamBootstrap | TestMethod::NonparamBootstrap => 250,
            TestMethod::Permutation => 500,
        }
    }
}

impl std::str::FromStr for TestMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TestMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown test method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleConfig {
    pub n_resamples: usize,
    pub seed: u64,
    /// Configuration used for every refit.
    pub fit: FitConfig,
}

impl ResampleConfig {
    pub fn for_method(method: TestMethod, seed: u64) -> Self {
        Self {
            n_resamples: method.default_resamples(),
            seed,
            fit: FitConfig {
                record_trace: false,
                ..FitConfig::default()
            },
        }
    }
}

/// Observed information for the diagonal of `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct BInformation {
    pub info: DVector<f64>,
    /// Component whose `σ̂²_h` was raised to the floor.
    pub sigma_h_floor_hit: Vec<bool>,
}

impl BInformation {
    /// `I_k^{-1/2}`; fails for non-positive information.
    pub fn standard_errors(&self) -> Result<DVector<f64>> {
        let mut se = DVector::zeros(self.info.len());
        for (k, &v) in self.info.iter().enumerate() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositiveInformation {
                    component: k,
                    value: v,
                });
            }
            se[k] = v.sqrt().recip();
        }
        Ok(se)
    }
}

/// Information for each `B_k` at the fitted θ̂:
///
/// `I_k = E[T_kᵀT_k]/σ²_h − E[(T_kᵀH_k)²]/σ⁴_h`, `H = U − TB̂`.
///
/// The second expectation is over the whole sample given the data. Rows are
/// conditionally independent, so it equals the sum of per-row variances of
/// `t_k h_k` plus the squared sum of their means; the per-row fourth moments
/// come from the Gaussian posterior of `(t_k, u_k)` via Isserlis' theorem.
/// When the latents are observed the correction vanishes at the least-squares
/// `B̂` and `I_k` is the linear-model information `Σ t²/σ²_h`.
pub fn fisher_info_b(theta: &ModelParams, moments: &LatentMoments) -> Result<BInformation> {
    let r = theta.ranks().r;
    if moments.ranks != theta.ranks() {
        return Err(Error::DimensionMismatch {
            context: "moments rank layout",
            expected: theta.ranks().latent_dim(),
            found: moments.ranks.latent_dim(),
        });
    }
    let su = theta.sigma_u2();
    let s_tt = moments.s_tt();
    let cov = &moments.posterior_cov;
    let mut info = DVector::zeros(r);
    let mut hit = vec![false; r];
    for k in 0..r {
        let b = theta.b[k];
        let floor = SIGMA_H_FLOOR * su[k];
        let sh = if theta.sigma_h2[k] < floor {
            hit[k] = true;
            floor
        } else {
            theta.sigma_h2[k]
        };
        let var_t = cov[(k, k)];
        let var_u = cov[(r + k, r + k)];
        let cov_tu = cov[(k, r + k)];
        let var_h = var_u - 2.0 * b * cov_tu + b * b * var_t;
        let cov_th = cov_tu - b * var_t;

        let mut sum_var = 0.0;
        let mut sum_mean = 0.0;
        for i in 0..moments.n {
            let mt = moments.mean_t[(i, k)];
            let mh = moments.mean_u[(i, k)] - b * mt;
            sum_mean += mt * mh + cov_th;
            sum_var += var_t * var_h
                + cov_th * cov_th
                + mt * mt * var_h
                + mh * mh * var_t
                + 2.0 * mt * mh * cov_th;
        }
        let q = sum_var + sum_mean * sum_mean;
        info[k] = s_tt[(k, k)] / sh - q / (sh * sh);
    }
    Ok(BInformation {
        info,
        sigma_h_floor_hit: hit,
    })
}

/// Two-sided standard-normal p-value.
pub fn normal_two_sided_p(t: f64) -> f64 {
    erfc(t.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentTest {
    pub b_hat: f64,
    pub se: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub components: Vec<ComponentTest>,
    /// Bonferroni combination `min(1, r·min_k p_k)`.
    pub combined_p: f64,
    pub method: TestMethod,
    pub n_resamples: usize,
    pub n_failed: usize,
}

impl TestResult {
    pub fn rejects(&self, component: usize, alpha: f64) -> bool {
        self.components[component].p_value < alpha
    }
}

fn bonferroni(ps: &[f64]) -> f64 {
    let min = ps.iter().copied().fold(1.0_f64, f64::min);
    (min * ps.len() as f64).min(1.0)
}

fn assemble(
    b_hat: &DVector<f64>,
    se: &DVector<f64>,
    p_values: Option<Vec<f64>>,
    method: TestMethod,
    n_resamples: usize,
    n_failed: usize,
) -> TestResult {
    let components: Vec<ComponentTest> = (0..b_hat.len())
        .map(|k| {
            let t = b_hat[k] / se[k];
            let p = match &p_values {
                Some(ps) => ps[k],
                None => normal_two_sided_p(t),
            };
            ComponentTest {
                b_hat: b_hat[k],
                se: se[k],
                t_stat: t,
                p_value: p,
            }
        })
        .collect();
    let ps: Vec<f64> = components.iter().map(|c| c.p_value).collect();
    TestResult {
        combined_p: bonferroni(&ps),
        components,
        method,
        n_resamples,
        n_failed,
    }
}

/// Asymptotic Wald test from a fit.
pub fn asymptotic_test(fit: &FitResult) -> Result<TestResult> {
    let info = fisher_info_b(&fit.theta, &fit.final_moments)?;
    let se = info.standard_errors()?;
    Ok(assemble(&fit.theta.b, &se, None, TestMethod::Asymptotic, 0, 0))
}

/// Greedy matching of `estimate` columns to `reference` columns by largest
/// absolute inner product. Returns, for each reference column, the matched
/// estimate column and the sign of the inner product.
pub fn match_components(
    reference: &DMatrix<f64>,
    estimate: &DMatrix<f64>,
) -> Vec<(usize, f64)> {
    let k_ref = reference.ncols();
    let k_est = estimate.ncols();
    let inner = reference.tr_mul(estimate);
    let mut pairs: Vec<(usize, usize)> = (0..k_ref)
        .flat_map(|i| (0..k_est).map(move |j| (i, j)))
        .collect();
    pairs.sort_by(|&(a, b), &(c, d)| {
        inner[(c, d)]
            .abs()
            .total_cmp(&inner[(a, b)].abs())
            .then((a, b).cmp(&(c, d)))
    });
    let mut out = vec![(usize::MAX, 1.0); k_ref];
    let mut used_ref = vec![false; k_ref];
    let mut used_est = vec![false; k_est];
    for (i, j) in pairs {
        if used_ref[i] || used_est[j] {
            continue;
        }
        used_ref[i] = true;
        used_est[j] = true;
        out[i] = (j, if inner[(i, j)] < 0.0 { -1.0 } else { 1.0 });
    }
    out
}

/// `B̂` of a replicate fit expressed in the reference orientation: components
/// are matched on the x-loadings and each entry carries the sign implied by
/// the replicate's orientation of both `W` and `C`.
pub fn aligned_b(reference: &ModelParams, replicate: &ModelParams) -> DVector<f64> {
    let matches = match_components(&reference.w, &replicate.w);
    DVector::from_iterator(
        matches.len(),
        matches.iter().enumerate().map(|(k, &(j, sign_w))| {
            let sign_c = if reference.c.column(k).dot(&replicate.c.column(j)) < 0.0 {
                -1.0
            } else {
                1.0
            };
            sign_w * sign_c * replicate.b[j]
        }),
    )
}

/// Runs `n` independent refits, each on the data built by `make_data`.
/// Fails when more than [`MAX_FAILURE_FRACTION`] of them fail.
fn refit_replicates<F, E, T>(
    ranks: RankSpec,
    resample: &ResampleConfig,
    make_data: F,
    extract: E,
) -> Result<(Vec<T>, usize)>
where
    F: Fn(&mut ChaCha8Rng) -> Result<DataPair> + Sync,
    E: Fn(&FitResult) -> Result<T> + Sync,
    T: Send,
{
    let n = resample.n_resamples;
    let outcomes: Vec<Option<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(resample.seed, 0x7e57, i as u64));
            let data = make_data(&mut rng).ok()?;
            let res = fit(&data, ranks, &resample.fit).ok()?;
            extract(&res).ok()
        })
        .collect();
    let failed = outcomes.iter().filter(|o| o.is_none()).count();
    if n > 0 && failed as f64 > MAX_FAILURE_FRACTION * n as f64 {
        return Err(Error::ResamplingFailures { failed, total: n });
    }
    Ok((outcomes.into_iter().flatten().collect(), failed))
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Replicate estimates of `B` from parametric resampling of `source`, aligned
/// to `reference`. Each replicate draws `n` rows, centers them and refits.
pub fn parametric_b_replicates(
    source: &ModelParams,
    reference: &ModelParams,
    n: usize,
    resample: &ResampleConfig,
) -> Result<(Vec<DVector<f64>>, usize)> {
    refit_replicates(
        source.ranks(),
        resample,
        |rng| {
            let s = sample_with_rng(source, n, rng)?;
            Ok(DataPair::new(s.x, s.y)?.centered().0)
        },
        |res| Ok(aligned_b(reference, &res.theta)),
    )
}

/// Per-component standard deviation of replicate vectors.
pub fn replicate_sd(replicates: &[DVector<f64>]) -> DVector<f64> {
    let r = replicates.first().map_or(0, |v| v.len());
    DVector::from_fn(r, |k, _| {
        let vals: Vec<f64> = replicates.iter().map(|v| v[k]).collect();
        sample_sd(&vals)
    })
}

/// Global test of `H₀: B = 0` for a fitted model.
pub fn global_test(
    fit_result: &FitResult,
    data: &DataPair,
    method: TestMethod,
    resample: &ResampleConfig,
) -> Result<TestResult> {
    let theta = &fit_result.theta;
    let ranks = theta.ranks();
    data.check_dims(ranks.p, ranks.q)?;
    let n_res = resample.n_resamples;
    if method != TestMethod::Asymptotic && n_res < 2 {
        return Err(Error::InvalidConfig(
            "resampling methods need at least 2 resamples".into(),
        ));
    }
    match method {
        TestMethod::Asymptotic => asymptotic_test(fit_result),
        TestMethod::ParamBootstrap => {
            let mut null_theta = theta.clone();
            // Under B = 0 all of u's variance is heterogeneity.
            null_theta.sigma_h2 = theta.sigma_u2();
            null_theta.b.fill(0.0);
            let (reps, failed) = parametric_b_replicates(&null_theta, theta, data.n(), resample)?;
            let se = replicate_sd(&reps);
            Ok(assemble(&theta.b, &se, None, method, n_res, failed))
        }
        TestMethod::NonparamBootstrap => {
            let n = data.n();
            let (reps, failed) = refit_replicates(
                ranks,
                resample,
                |rng| {
                    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                    Ok(data.select_rows(&rows).centered().0)
                },
                |res| Ok(aligned_b(theta, &res.theta)),
            )?;
            let se = replicate_sd(&reps);
            Ok(assemble(&theta.b, &se, None, method, n_res, failed))
        }
        TestMethod::Permutation => {
            let observed = asymptotic_test(fit_result)?;
            let n = data.n();
            let (reps, failed) = refit_replicates(
                ranks,
                resample,
                |rng| {
                    let mut rows: Vec<usize> = (0..n).collect();
                    rows.shuffle(rng);
                    Ok(DataPair {
                        x: data.x.clone(),
                        y: data.y.select_rows(&rows),
                    })
                },
                |res| {
                    let t = asymptotic_test(res)?;
                    Ok(t.components.iter().map(|c| c.t_stat.abs()).collect::<Vec<f64>>())
                },
            )?;
            let valid = reps.len();
            let p_values: Vec<f64> = observed
                .components
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let exceed = reps.iter().filter(|t| t[k] >= c.t_stat.abs()).count();
                    (1 + exceed) as f64 / (1 + valid) as f64
                })
                .collect();
            let se = DVector::from_iterator(ranks.r, observed.components.iter().map(|c| c.se));
            Ok(assemble(&theta.b, &se, Some(p_values), method, n_res, failed))
        }
    }
}
