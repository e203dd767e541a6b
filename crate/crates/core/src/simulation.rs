//! Simulation scenarios and study runners.
//!
//! A scenario fixes the dimensions, noise proportions, heterogeneity and
//! effect sizes; each replicate draws fresh loadings and data from seeds
//! derived from the scenario seed and the replicate index, so any single
//! replicate can be regenerated with [`gen_scenario_replicate`].

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::conditioning::{orth, predict_y_from_x};
use crate::data::DataPair;
use crate::em::{fit, FitConfig};
use crate::error::{Error, Result};
use crate::inference::{global_test, match_components, ResampleConfig, TestMethod, TestResult};
use crate::linalg::top_svd;
use crate::model::{sample, validate_and_normalize, ModelParams, RankSpec};
use crate::seeds::derive_seed;

const STREAM_THETA: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_RESAMPLE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub ranks: RankSpec,
    /// Share of the total x variance due to noise, in (0, 1).
    pub noise_x: f64,
    /// Share of the total y variance due to noise, in (0, 1).
    pub noise_y: f64,
    /// Share of `σ²_u` due to `σ²_h` at unit effect, in [0, 1).
    pub heterogeneity: f64,
    /// One effect size per joint component.
    pub b_values: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        self.ranks
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (name, v) in [("noise_x", self.noise_x), ("noise_y", self.noise_y)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.heterogeneity >= 0.0 && self.heterogeneity < 1.0) {
            return bad(format!(
                "heterogeneity must lie in [0, 1), got {}",
                self.heterogeneity
            ));
        }
        if self.b_values.len() != self.ranks.r {
            return bad(format!(
                "b_values has {} entries for r = {}",
                self.b_values.len(),
                self.ranks.r
            ));
        }
        if self.b_values.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return bad("b_values must be finite and non-negative".into());
        }
        if self.heterogeneity == 0.0 && self.b_values.contains(&0.0) {
            return bad("a zero effect needs heterogeneity > 0".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.n_train < self.ranks.min_sample_size() {
            return bad(format!(
                "n_train = {} is below the minimum {} for these ranks",
                self.n_train,
                self.ranks.min_sample_size()
            ));
        }
        Ok(())
    }

    /// Copy with every joint effect set to `effect`.
    pub fn with_effect(&self, effect: f64) -> Self {
        Self {
            b_values: vec![effect; self.ranks.r],
            ..self.clone()
        }
    }
}

/// Linearly decreasing variance profile `(m, m−1, …, 1)/m`.
fn decreasing_profile(m: usize) -> DVector<f64> {
    DVector::from_fn(m, |k, _| (m - k) as f64 / m as f64)
}

/// True parameters for a scenario, drawn with the given seed.
pub fn scenario_theta(config: &ScenarioConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let RankSpec { p, q, r, rx, ry } = config.ranks;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |n: usize, m: usize| {
        DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal))
    };
    let w = orth(&gauss(p, r))?;
    let w_perp = orth(&gauss(p, rx))?;
    let c = orth(&gauss(q, r))?;
    let c_perp = orth(&gauss(q, ry))?;

    // Distinct x-side variances with the joint part first, so the joint and
    // specific subspaces stay identifiable even when B = 0.
    let x_profile = decreasing_profile(r + rx);
    let sigma_t2 = x_profile.rows(0, r).into_owned();
    let sigma_to2 = x_profile.rows(r, rx).into_owned();
    let het = config.heterogeneity;
    let sigma_h2 = &sigma_t2 * (het / (1.0 - het));
    let b = DVector::from_column_slice(&config.b_values);
    let sigma_u2 = b.component_mul(&b).component_mul(&sigma_t2) + &sigma_h2;
    let u_min = sigma_u2.min();
    let sigma_uo2 = DVector::from_fn(ry, |k, _| u_min * (ry - k) as f64 / (ry + 1) as f64);

    let latent_x = sigma_t2.sum() + sigma_to2.sum();
    let latent_y = sigma_u2.sum() + sigma_uo2.sum();
    let sigma_e2 = config.noise_x / (1.0 - config.noise_x) * latent_x / p as f64;
    let sigma_f2 = config.noise_y / (1.0 - config.noise_y) * latent_y / q as f64;

    validate_and_normalize(ModelParams {
        w,
        w_perp,
        c,
        c_perp,
        b,
        sigma_t2,
        sigma_to2,
        sigma_uo2,
        sigma_h2,
        sigma_e2,
        sigma_f2,
    })
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub theta: ModelParams,
    pub train: DataPair,
    pub test: DataPair,
    pub replicate: usize,
    pub train_seed: u64,
}

/// Seeds of the `(θ, train, test)` streams for a replicate.
pub fn replicate_seeds(config: &ScenarioConfig, replicate: usize) -> (u64, u64, u64) {
    let i = replicate as u64;
    (
        derive_seed(config.seed, STREAM_THETA, i),
        derive_seed(config.seed, STREAM_TRAIN, i),
        derive_seed(config.seed, STREAM_TEST, i),
    )
}

pub fn gen_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    gen_scenario_replicate(config, 0)
}

pub fn gen_scenario_replicate(config: &ScenarioConfig, replicate: usize) -> Result<Scenario> {
    let (s_theta, s_train, s_test) = replicate_seeds(config, replicate);
    let theta = scenario_theta(config, s_theta)?;
    let draw = |n: usize, seed: u64| -> Result<DataPair> {
        if n == 0 {
            let rk = config.ranks;
            return DataPair::new(DMatrix::zeros(0, rk.p), DMatrix::zeros(0, rk.q));
        }
        let s = sample(&theta, n, seed)?;
        DataPair::new(s.x, s.y)
    };
    let train = draw(config.n_train, s_train)?;
    let test = draw(config.n_test, s_test)?;
    Ok(Scenario {
        theta,
        train,
        test,
        replicate,
        train_seed: s_train,
    })
}

fn top_set(col: nalgebra::DVectorView<'_, f64>, m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..col.len()).collect();
    idx.sort_by(|&a, &b| col[b].abs().total_cmp(&col[a].abs()).then(a.cmp(&b)));
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

/// Mean overlap between the true and estimated top-`fraction` features per
/// component, after greedy matching of estimated to true components.
pub fn tpr_top_features(w_hat: &DMatrix<f64>, w_true: &DMatrix<f64>, fraction: f64) -> Result<f64> {
    if w_hat.shape() != w_true.shape() {
        return Err(Error::DimensionMismatch {
            context: "loading matrices for TPR",
            expected: w_true.nrows() * w_true.ncols(),
            found: w_hat.nrows() * w_hat.ncols(),
        });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("fraction must lie in (0, 1), got {fraction}")));
    }
    let (p, k) = w_true.shape();
    if k == 0 {
        return Ok(1.0);
    }
    let m = ((fraction * p as f64).ceil() as usize).clamp(1, p);
    let matches = match_components(w_true, w_hat);
    let total: f64 = matches
        .iter()
        .enumerate()
        .map(|(i, &(j, _))| {
            let truth = top_set(w_true.column(i), m);
            let est = top_set(w_hat.column(j), m);
            let hits = est.iter().filter(|e| truth.binary_search(e).is_ok()).count();
            hits as f64 / m as f64
        })
        .sum();
    Ok(total / k as f64)
}

/// Root mean squared error of predicting `y` from `x` under θ.
pub fn rmsep(theta: &ModelParams, data: &DataPair) -> Result<f64> {
    let y_hat = predict_y_from_x(theta, &data.x)?;
    if y_hat.shape() != data.y.shape() {
        return Err(Error::DimensionMismatch {
            context: "columns of Y",
            expected: y_hat.ncols(),
            found: data.y.ncols(),
        });
    }
    let n = data.n().max(1) as f64;
    Ok(((&data.y - y_hat).norm_squared() / n).sqrt())
}

/// Two-block PLS by SVD of the cross-product: `(W, C)` are the top `r`
/// singular vector pairs of `XᵀY`.
pub fn pls_svd_baseline(data: &DataPair, r: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if r == 0 || r > data.p().min(data.q()) {
        return Err(Error::InvalidRanks(format!(
            "r = {r} must lie in 1..={}",
            data.p().min(data.q())
        )));
    }
    let cross = data.x.tr_mul(&data.y);
    let (w, _, c) = top_svd(&cross, r);
    Ok((w, c))
}

/// Prediction from the PLS baseline: regress `YC` scores on `XW` scores.
pub fn pls_baseline_predict(
    train: &DataPair,
    w: &DMatrix<f64>,
    c: &DMatrix<f64>,
    x_new: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let t = &train.x * w;
    let u = &train.y * c;
    let coef = (t.tr_mul(&t))
        .cholesky()
        .ok_or(Error::SingularMomentMatrix { component: 0 })?
        .solve(&t.tr_mul(&u));
    Ok(x_new * w * coef * c.transpose())
}

/// One row of a long-format study table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRecord {
    pub replicate: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl StudyRecord {
    fn new(replicate: usize, seed: u64, metric: impl Into<String>, value: f64) -> Self {
        Self {
            replicate,
            seed,
            metric: metric.into(),
            value,
        }
    }
}

/// Feature-selection and prediction metrics of PO2PLS and the PLS baseline.
///
/// Per replicate: `tpr_w`, `tpr_c`, `congruence_k`, `b_rel_error_k`,
/// `rmsep_train`, `rmsep_test`, `rmsep_test_oracle`, `pls_tpr_w`,
/// `pls_tpr_c`, `pls_rmsep_test`, `n_iter`, `converged`, or `fit_failed`.
pub fn run_accuracy_study(config: &ScenarioConfig, fit_config: &FitConfig) -> Result<Vec<StudyRecord>> {
    config.validate()?;
    let per_rep: Vec<Result<Vec<StudyRecord>>> = (0..config.replicates)
        .into_par_iter()
        .map(|rep| accuracy_replicate(config, fit_config, rep))
        .collect();
    let mut out = Vec::new();
    for rows in per_rep {
        out.extend(rows?);
    }
    Ok(out)
}

fn accuracy_replicate(config: &ScenarioConfig, fit_config: &FitConfig, rep: usize) -> Result<Vec<StudyRecord>> {
    let sc = gen_scenario_replicate(config, rep)?;
    let seed = sc.train_seed;
    let mut rows = Vec::new();
    let res = match fit(&sc.train, config.ranks, fit_config) {
        Ok(r) => r,
        Err(_) => {
            rows.push(StudyRecord::new(rep, seed, "fit_failed", 1.0));
            return Ok(rows);
        }
    };
    let truth = &sc.theta;
    let est = &res.theta;
    rows.push(StudyRecord::new(rep, seed, "tpr_w", tpr_top_features(&est.w, &truth.w, 0.25)?));
    rows.push(StudyRecord::new(rep, seed, "tpr_c", tpr_top_features(&est.c, &truth.c, 0.25)?));
    let matches = match_components(&truth.w, &est.w);
    for (k, &(j, _)) in matches.iter().enumerate() {
        let congruence = truth.w.column(k).dot(&est.w.column(j)).abs();
        rows.push(StudyRecord::new(rep, seed, format!("congruence_{}", k + 1), congruence));
        let b_err = if truth.b[k] != 0.0 {
            (est.b[j] - truth.b[k]).abs() / truth.b[k]
        } else {
            est.b[j].abs()
        };
        rows.push(StudyRecord::new(rep, seed, format!("b_rel_error_{}", k + 1), b_err));
    }
    rows.push(StudyRecord::new(rep, seed, "rmsep_train", rmsep(est, &sc.train)?));
    if sc.test.n() > 0 {
        rows.push(StudyRecord::new(rep, seed, "rmsep_test", rmsep(est, &sc.test)?));
        rows.push(StudyRecord::new(rep, seed, "rmsep_test_oracle", rmsep(truth, &sc.test)?));
    }
    let (pw, pc) = pls_svd_baseline(&sc.train, config.ranks.r)?;
    rows.push(StudyRecord::new(rep, seed, "pls_tpr_w", tpr_top_features(&pw, &truth.w, 0.25)?));
    rows.push(StudyRecord::new(rep, seed, "pls_tpr_c", tpr_top_features(&pc, &truth.c, 0.25)?));
    if sc.test.n() > 0 {
        let y_hat = pls_baseline_predict(&sc.train, &pw, &pc, &sc.test.x)?;
        let err = ((&sc.test.y - y_hat).norm_squared() / sc.test.n() as f64).sqrt();
        rows.push(StudyRecord::new(rep, seed, "pls_rmsep_test", err));
    }
    rows.push(StudyRecord::new(rep, seed, "n_iter", res.n_iter as f64));
    rows.push(StudyRecord::new(rep, seed, "converged", f64::from(u8::from(res.converged))));
    Ok(rows)
}

/// Exact (Clopper–Pearson) two-sided confidence interval for a binomial
/// proportion.
pub fn binomial_ci(successes: usize, trials: usize, level: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let alpha = 1.0 - level;
    let x = successes as f64;
    let n = trials as f64;
    let lower = if successes == 0 {
        0.0
    } else {
        Beta::new(x, n - x + 1.0)
            .expect("valid beta")
            .inverse_cdf(alpha / 2.0)
    };
    let upper = if successes == trials {
        1.0
    } else {
        Beta::new(x + 1.0, n - x)
            .expect("valid beta")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lower, upper)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionRate {
    /// `component_k` or `combined` (Bonferroni).
    pub target: String,
    pub rejections: usize,
    pub trials: usize,
    pub proportion: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl RejectionRate {
    fn new(target: String, rejections: usize, trials: usize) -> Self {
        let (ci_lower, ci_upper) = binomial_ci(rejections, trials, 0.95);
        Self {
            target,
            rejections,
            trials,
            proportion: if trials > 0 { rejections as f64 / trials as f64 } else { f64::NAN },
            ci_lower,
            ci_upper,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Type1Report {
    /// Per-component rates followed by the combined rate.
    pub rates: Vec<RejectionRate>,
    pub failed: usize,
    pub records: Vec<StudyRecord>,
}

fn rejection_rates(tests: &[TestResult], r: usize, alpha: f64) -> Vec<RejectionRate> {
    let trials = tests.len();
    let mut rates: Vec<RejectionRate> = (0..r)
        .map(|k| {
            let rej = tests.iter().filter(|t| t.rejects(k, alpha)).count();
            RejectionRate::new(format!("component_{}", k + 1), rej, trials)
        })
        .collect();
    let rej = tests.iter().filter(|t| t.combined_p < alpha).count();
    rates.push(RejectionRate::new("combined".into(), rej, trials));
    rates
}

fn test_records(rep: usize, seed: u64, t: &TestResult) -> Vec<StudyRecord> {
    let mut rows = Vec::new();
    for (k, c) in t.components.iter().enumerate() {
        rows.push(StudyRecord::new(rep, seed, format!("b_hat_{}", k + 1), c.b_hat));
        rows.push(StudyRecord::new(rep, seed, format!("se_{}", k + 1), c.se));
        rows.push(StudyRecord::new(rep, seed, format!("t_stat_{}", k + 1), c.t_stat));
        rows.push(StudyRecord::new(rep, seed, format!("p_value_{}", k + 1), c.p_value));
    }
    rows.push(StudyRecord::new(rep, seed, "p_value_combined", t.combined_p));
    rows
}

/// Fits one replicate and runs the requested test; `None` on failure.
fn replicate_test(
    config: &ScenarioConfig,
    fit_config: &FitConfig,
    rep: usize,
    method: TestMethod,
    n_resamples: usize,
) -> Option<(u64, TestResult)> {
    let sc = gen_scenario_replicate(config, rep).ok()?;
    let res = fit(&sc.train, config.ranks, fit_config).ok()?;
    let resample = ResampleConfig {
        n_resamples,
        seed: derive_seed(config.seed, STREAM_RESAMPLE, rep as u64),
        fit: *fit_config,
    };
    let t = global_test(&res, &sc.train, method, &resample).ok()?;
    Some((sc.train_seed, t))
}

/// Rejection proportion of the asymptotic test at level `alpha` when the
/// data are simulated under the configured effects (normally all zero).
pub fn run_type1_study(config: &ScenarioConfig, fit_config: &FitConfig, alpha: f64) -> Result<Type1Report> {
    config.validate()?;
    if config.b_values.iter().any(|&b| b != 0.0) {
        return Err(Error::InvalidConfig("type I study needs all b_values = 0".into()));
    }
    let outcomes: Vec<Option<(u64, TestResult)>> = (0..config.replicates)
        .into_par_iter()
        .map(|rep| replicate_test(config, fit_config, rep, TestMethod::Asymptotic, 0))
        .collect();
    let failed = outcomes.iter().filter(|o| o.is_none()).count();
    let mut records = Vec::new();
    let mut tests = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Some((seed, t)) => {
                records.extend(test_records(rep, seed, &t));
                tests.push(t);
            }
            None => {
                let seed = replicate_seeds(config, rep).1;
                records.push(StudyRecord::new(rep, seed, "fit_failed", 1.0));
            }
        }
    }
    Ok(Type1Report {
        rates: rejection_rates(&tests, config.ranks.r, alpha),
        failed,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerRow {
    pub effect: f64,
    pub method: String,
    #[serde(flatten)]
    pub rate: RejectionRate,
    pub failed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerStudyOptions {
    pub alpha: f64,
    pub n_bootstrap: usize,
    pub n_permutations: usize,
}

impl Default for PowerStudyOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            n_bootstrap: TestMethod::ParamBootstrap.default_resamples(),
            n_permutations: TestMethod::Permutation.default_resamples(),
        }
    }
}

/// Rejection proportions per `(effect, method)`. Each effect sets every
/// joint `B_k`; replicate seeds are shared across effects and methods.
pub fn run_power_study(
    config: &ScenarioConfig,
    effects: &[f64],
    methods: &[TestMethod],
    fit_config: &FitConfig,
    options: &PowerStudyOptions,
) -> Result<Vec<PowerRow>> {
    if effects.is_empty() || methods.is_empty() {
        return Err(Error::InvalidConfig("power study needs effects and methods".into()));
    }
    let mut rows = Vec::new();
    for &effect in effects {
        let cfg = config.with_effect(effect);
        cfg.validate()?;
        for &method in methods {
            let n_res = match method {
                TestMethod::Asymptotic => 0,
                TestMethod::Permutation => options.n_permutations,
                _ => options.n_bootstrap,
            };
            let outcomes: Vec<Option<(u64, TestResult)>> = (0..cfg.replicates)
                .into_par_iter()
                .map(|rep| replicate_test(&cfg, fit_config, rep, method, n_res))
                .collect();
            let failed = outcomes.iter().filter(|o| o.is_none()).count();
            let tests: Vec<TestResult> = outcomes.into_iter().flatten().map(|(_, t)| t).collect();
            for rate in rejection_rates(&tests, cfg.ranks.r, options.alpha) {
                rows.push(PowerRow {
                    effect,
                    method: method.name().to_string(),
                    rate,
                    failed,
                });
            }
        }
    }
    Ok(rows)
}

/// Writes study records as long-format CSV, prefixed with the scenario fields.
pub fn write_long_csv<W: Write>(out: W, config: &ScenarioConfig, records: &[StudyRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n_train", "n_test", "p", "q", "r", "r_x", "r_y", "noise_x", "noise_y", "heterogeneity",
        "b_values", "replicate", "seed", "metric", "value",
    ])?;
    let b = config
        .b_values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(";");
    let rk = config.ranks;
    for rec in records {
        w.write_record([
            config.n_train.to_string(),
            config.n_test.to_string(),
            rk.p.to_string(),
            rk.q.to_string(),
            rk.r.to_string(),
            rk.rx.to_string(),
            rk.ry.to_string(),
            format!("{:?}", config.noise_x),
            format!("{:?}", config.noise_y),
            format!("{:?}", config.heterogeneity),
            b.clone(),
            rec.replicate.to_string(),
            rec.seed.to_string(),
            rec.metric.clone(),
            format!("{:?}", rec.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes power-study rows as CSV.
pub fn write_power_csv<W: Write>(out: W, rows: &[PowerRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes rejection rates as CSV.
pub fn write_rates_csv<W: Write>(out: W, rates: &[RejectionRate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rate in rates {
        w.serialize(rate)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ScenarioConfig {
        ScenarioConfig {
            n_train: 60,
            n_test: 30,
            ranks: RankSpec::new(20, 6, 2, 1, 1).unwrap(),
            noise_x: 0.4,
            noise_y: 0.4,
            heterogeneity: 0.8,
            b_values: vec![1.0, 1.0],
            replicates: 2,
            seed: 11,
        }
    }

    #[test]
    fn noise_and_heterogeneity_fractions_are_exact() {
        let cfg = config();
        let theta = gen_scenario(&cfg).unwrap().theta;
        let p = cfg.ranks.p as f64;
        let total_x = theta.sigma_t2.sum() + theta.sigma_to2.sum() + p * theta.sigma_e2;
        assert!((p * theta.sigma_e2 / total_x - 0.4).abs() < 1e-10);
        let q = cfg.ranks.q as f64;
        let su = theta.sigma_u2();
        let total_y = su.sum() + theta.sigma_uo2.sum() + q * theta.sigma_f2;
        assert!((q * theta.sigma_f2 / total_y - 0.4).abs() < 1e-10);
        for k in 0..2 {
            assert!((theta.sigma_h2[k] / su[k] - 0.8).abs() < 1e-10);
        }
    }

    #[test]
    fn homogeneous_unit_effect_setting() {
        let cfg = ScenarioConfig {
            heterogeneity: 0.0,
            ..config()
        };
        let theta = gen_scenario(&cfg).unwrap().theta;
        assert!(theta.sigma_h2.iter().all(|&v| v == 0.0));
        assert!(theta.b.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = config();
        cfg.replicates = 0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = config();
        cfg.heterogeneity = 0.0;
        cfg.b_values = vec![0.0, 0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = config();
        cfg.noise_x = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scenario_is_deterministic_and_streams_differ() {
        let cfg = config();
        let a = gen_scenario(&cfg).unwrap();
        let b = gen_scenario(&cfg).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.train, b.train);
        assert_ne!(a.train.x.rows(0, 5), a.test.x.rows(0, 5));
        let other = gen_scenario_replicate(&cfg, 1).unwrap();
        assert_ne!(a.theta.w, other.theta.w);
    }

    #[test]
    fn tpr_identity_and_sign_flip() {
        let theta = gen_scenario(&config()).unwrap().theta;
        assert_eq!(tpr_top_features(&theta.w, &theta.w, 0.25).unwrap(), 1.0);
        let flipped = -&theta.w;
        assert_eq!(tpr_top_features(&flipped, &theta.w, 0.25).unwrap(), 1.0);
        assert!(tpr_top_features(&theta.w.columns(0, 1).into_owned(), &theta.w, 0.25).is_err());
    }

    #[test]
    fn rmsep_edge_cases() {
        let sc = gen_scenario(&config()).unwrap();
        let mut null = sc.theta.clone();
        null.b.fill(0.0);
        let expected = (sc.test.y.norm_squared() / sc.test.n() as f64).sqrt();
        assert!((rmsep(&null, &sc.test).unwrap() - expected).abs() < 1e-12);
        let y_hat = predict_y_from_x(&sc.theta, &sc.test.x).unwrap();
        let perfect = DataPair::new(sc.test.x.clone(), y_hat).unwrap();
        assert!(rmsep(&sc.theta, &perfect).unwrap() < 1e-12);
    }

    #[test]
    fn baseline_is_semi_orthogonal() {
        let sc = gen_scenario(&config()).unwrap();
        let (w, c) = pls_svd_baseline(&sc.train, 2).unwrap();
        assert!(crate::linalg::orthonormality_defect(&w) < 1e-12);
        assert!(crate::linalg::orthonormality_defect(&c) < 1e-12);
    }

    #[test]
    fn baseline_recovers_rank_one_cross_product() {
        let a = DVector::from_vec(vec![1.0, 2.0, 0.0, -1.0]);
        let bvec = DVector::from_vec(vec![0.5, 0.0, 1.0]);
        // X = z aᵀ, Y = z bᵀ gives XᵀY ∝ a bᵀ.
        let z = DVector::from_vec(vec![1.0, -2.0, 0.5, 1.5, -1.0]);
        let data = DataPair::new(&z * a.transpose(), &z * bvec.transpose()).unwrap();
        let (w, c) = pls_svd_baseline(&data, 1).unwrap();
        assert!((w.column(0).dot(&a.normalize()).abs() - 1.0).abs() < 1e-12);
        assert!((c.column(0).dot(&bvec.normalize()).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binomial_interval_edges() {
        let (lo, hi) = binomial_ci(0, 1, 0.95);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.975).abs() < 1e-9);
        let (lo, hi) = binomial_ci(1, 1, 0.95);
        assert!((lo - 0.025).abs() < 1e-9);
        assert_eq!(hi, 1.0);
        let (lo, hi) = binomial_ci(100, 2000, 0.95);
        assert!(lo > 0.040 && lo < 0.042, "{lo}");
        assert!(hi > 0.060 && hi < 0.062, "{hi}");
    }

    #[test]
    fn single_replicate_type1_is_degenerate_but_reported() {
        let cfg = ScenarioConfig {
            b_values: vec![0.0, 0.0],
            heterogeneity: 0.5,
            replicates: 1,
            ..config()
        };
        let report = run_type1_study(&cfg, &FitConfig::default(), 0.05).unwrap();
        for rate in &report.rates {
            assert!(rate.proportion == 0.0 || rate.proportion == 1.0 || rate.trials == 0);
            assert!(rate.ci_lower <= rate.ci_upper);
        }
        assert_eq!(report.rates.len(), 3);
    }
}
