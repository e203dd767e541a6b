//! Maximum-likelihood fitting by expectation/conditional maximization.
//!
//! One sweep computes the latent moments at the current θ and then updates,
//! in order: `W`, `W⊥` (using the new `W`), `C`, `C⊥` (using the new `C`),
//! `B`, the latent variances and finally the two noise variances at the new
//! loadings. Every update is the exact maximizer of the expected
//! complete-data log-likelihood over its block with the others held fixed,
//! so the observed log-likelihood never decreases.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{orth, posterior, posterior_in, Ambient, LatentMoments};
use crate::data::DataPair;
use crate::error::{Error, Result};
use crate::linalg::{frob_dot, hcat, sq_norm, top_right_singular, top_svd};
use crate::model::{validate_and_normalize, ModelParams, RankSpec};

/// Relative floor for variance updates, scaled by the per-entry data variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Relative floor for the starting noise variances.
const INIT_NOISE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "seed")]
pub enum InitStrategy {
    /// Singular vectors of the cross-covariance `XᵀY`, then residual SVDs.
    SvdPls,
    /// Random semi-orthogonal loadings scaled to the data.
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Stop when `|ΔL| ≤ tol·|L|`.
    pub tol: f64,
    pub init: InitStrategy,
    pub record_trace: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            tol: 1e-6,
            init: InitStrategy::SvdPls,
            record_trace: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: ModelParams,
    /// Observed log-likelihood at the start and after every sweep. Holds only
    /// the final value when tracing is off.
    pub loglik_trace: Vec<f64>,
    pub loglik: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// A variance update hit its floor at some sweep.
    pub variance_floor_hit: bool,
    /// Moments at the returned (normalized) θ.
    pub final_moments: LatentMoments,
}

impl FitResult {
    /// Wraps a given θ as a zero-iteration fit on `data`, with the moments
    /// and log-likelihood evaluated there.
    pub fn evaluate(theta: ModelParams, data: &DataPair) -> Result<Self> {
        theta.validate()?;
        let post = posterior(&theta, data)?;
        let loglik = post.loglik;
        Ok(Self {
            final_moments: post.into_moments(&theta),
            theta,
            loglik_trace: vec![loglik],
            loglik,
            n_iter: 0,
            converged: true,
            variance_floor_hit: false,
        })
    }
}

fn check_sample_size(data: &DataPair, ranks: &RankSpec) -> Result<()> {
    let needed = ranks.min_sample_size();
    if data.n() < needed {
        return Err(Error::RanksExceedSampleSize {
            n: data.n(),
            needed,
        });
    }
    Ok(())
}

fn check_inputs(data: &DataPair, ranks: &RankSpec) -> Result<(f64, f64)> {
    ranks.validate()?;
    data.check_dims(ranks.p, ranks.q)?;
    check_sample_size(data, ranks)?;
    let (nx, ny) = data.sq_norms();
    let n = data.n() as f64;
    let vx = nx / (n * ranks.p as f64);
    let vy = ny / (n * ranks.q as f64);
    if !(vx > 0.0) || !(vy > 0.0) {
        return Err(Error::DegenerateData(
            "X or Y has zero variance in every column".into(),
        ));
    }
    Ok((vx, vy))
}

fn mean_sq(col: nalgebra::DVectorView<'_, f64>) -> f64 {
    col.norm_squared() / col.len().max(1) as f64
}

/// Starting values for the ECM iterations.
pub fn initialize(data: &DataPair, ranks: RankSpec, config: &FitConfig) -> Result<ModelParams> {
    let (vx, vy) = check_inputs(data, &ranks)?;
    let theta = match config.init {
        InitStrategy::SvdPls => init_svd_pls(data, ranks, vx, vy)?,
        InitStrategy::Random(seed) => init_random(ranks, vx, vy, seed)?,
    };
    validate_and_normalize(theta)
}

fn init_svd_pls(data: &DataPair, ranks: RankSpec, vx: f64, vy: f64) -> Result<ModelParams> {
    let RankSpec { p, q, r, rx, ry } = ranks;
    let n = data.n() as f64;
    let cross = data.x.tr_mul(&data.y);
    let (w, _, c) = top_svd(&cross, r);
    if w.ncols() < r || c.ncols() < r {
        return Err(Error::DegenerateData("cross-covariance has too few singular values".into()));
    }

    let t = &data.x * &w;
    let u = &data.y * &c;
    let x_res = &data.x - &t * w.transpose();
    let y_res = &data.y - &u * c.transpose();
    let (w_perp, _) = top_right_singular(&x_res, rx);
    let (c_perp, _) = top_right_singular(&y_res, ry);
    if w_perp.ncols() < rx || c_perp.ncols() < ry {
        return Err(Error::DegenerateData("residuals have too few singular values".into()));
    }
    let w_perp = orth(&w_perp)?;
    let c_perp = orth(&c_perp)?;
    let t_perp = &data.x * &w_perp;
    let u_perp = &data.y * &c_perp;

    let mut b = DVector::zeros(r);
    let mut sigma_t2 = DVector::zeros(r);
    let mut sigma_h2 = DVector::zeros(r);
    for k in 0..r {
        let tt = t.column(k).norm_squared();
        let bk = if tt > 0.0 { t.column(k).dot(&u.column(k)) / tt } else { 0.0 };
        b[k] = bk;
        sigma_t2[k] = (tt / n).max(INIT_NOISE_FLOOR * vx);
        let resid = u.column(k) - t.column(k) * bk;
        sigma_h2[k] = mean_sq(resid.as_view()).max(INIT_NOISE_FLOOR * vy);
    }
    let sigma_to2 = DVector::from_fn(rx, |k, _| mean_sq(t_perp.column(k)).max(INIT_NOISE_FLOOR * vx));
    let sigma_uo2 = DVector::from_fn(ry, |k, _| mean_sq(u_perp.column(k)).max(INIT_NOISE_FLOOR * vy));

    let ex = &data.x - &t * w.transpose() - &t_perp * w_perp.transpose();
    let fy = &data.y - &u * c.transpose() - &u_perp * c_perp.transpose();
    let sigma_e2 = (sq_norm(&ex) / (n * p as f64)).max(INIT_NOISE_FLOOR * vx);
    let sigma_f2 = (sq_norm(&fy) / (n * q as f64)).max(INIT_NOISE_FLOOR * vy);

    Ok(ModelParams {
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

fn init_random(ranks: RankSpec, vx: f64, vy: f64, seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let RankSpec { p, q, r, rx, ry } = ranks;
    let mut gauss = |n: usize, m: usize| {
        DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal))
    };
    let w = orth(&gauss(p, r))?;
    let w_perp = orth(&gauss(p, rx))?;
    let c = orth(&gauss(q, r))?;
    let c_perp = orth(&gauss(q, ry))?;
    let mut uniform = |n: usize, lo: f64, hi: f64| DVector::from_fn(n, |_, _| rng.random_range(lo..hi));
    // Latent variances on the scale of the per-column data variance times p.
    let sigma_t2 = uniform(r, 0.5, 1.5) * (vx * p as f64 / (r + rx) as f64 * 0.5);
    let sigma_to2 = uniform(rx, 0.5, 1.5) * (vx * p as f64 / (r + rx) as f64 * 0.5);
    let sigma_uo2 = uniform(ry, 0.5, 1.5) * (vy * q as f64 / (r + ry) as f64 * 0.5);
    let sigma_h2 = uniform(r, 0.5, 1.5) * (vy * q as f64 / (r + ry) as f64 * 0.25);
    let b = uniform(r, 0.1, 1.0) * (vy * q as f64 / (vx * p as f64)).sqrt();
    Ok(ModelParams {
        w,
        w_perp,
        c,
        c_perp,
        b,
        sigma_t2,
        sigma_to2,
        sigma_uo2,
        sigma_h2,
        sigma_e2: 0.5 * vx,
        sigma_f2: 0.5 * vy,
    })
}

pub(crate) struct StepOutcome {
    pub theta: ModelParams,
    pub floor_hit: bool,
}

fn floored(value: f64, floor: f64, hit: &mut bool) -> f64 {
    if value < floor || !value.is_finite() {
        *hit = true;
        floor
    } else {
        value
    }
}

/// Conditional maximization given the moments at the current θ.
pub(crate) fn maximize(
    theta: &ModelParams,
    m: &LatentMoments,
    data: &DataPair,
    amb: &Ambient,
    floors: (f64, f64),
) -> Result<StepOutcome> {
    let RankSpec { r, rx, ry, .. } = theta.ranks();
    let (p, q) = (amb.p, amb.q);
    let n = m.n as f64;
    let (floor_x, floor_y) = floors;
    let mut hit = false;

    let s_tt = m.s_tt();
    for k in 0..r {
        if !(s_tt[(k, k)] > 0.0) {
            return Err(Error::SingularMomentMatrix { component: k });
        }
    }

    // x side
    let xt_t = data.x.tr_mul(&m.mean_t);
    let xt_to = data.x.tr_mul(&m.mean_to);
    let s_t_to = m.s_t_to();
    let w = orth(&(&xt_t - &theta.w_perp * s_t_to.transpose()))?;
    let w_perp = orth(&(&xt_to - &w * &s_t_to))?;

    // y side
    let yt_u = data.y.tr_mul(&m.mean_u);
    let yt_uo = data.y.tr_mul(&m.mean_uo);
    let s_u_uo = m.s_u_uo();
    let c = orth(&(&yt_u - &theta.c_perp * s_u_uo.transpose()))?;
    let c_perp = orth(&(&yt_uo - &c * &s_u_uo))?;

    // Diagonal B maximizes each component's residual sum separately.
    let s_ut = m.s_ut();
    let s_uu = m.s_uu();
    let b = DVector::from_fn(r, |k, _| s_ut[(k, k)] / s_tt[(k, k)]);

    let sigma_t2 = DVector::from_fn(r, |k, _| floored(s_tt[(k, k)] / n, floor_x, &mut hit));
    let s_toto = m.s_toto();
    let sigma_to2 = DVector::from_fn(rx, |k, _| floored(s_toto[(k, k)] / n, floor_x, &mut hit));
    let s_uouo = m.s_uouo();
    let sigma_uo2 = DVector::from_fn(ry, |k, _| floored(s_uouo[(k, k)] / n, floor_y, &mut hit));
    let sigma_h2 = DVector::from_fn(r, |k, _| {
        let bk = b[k];
        let hh = s_uu[(k, k)] - 2.0 * bk * s_ut[(k, k)] + bk * bk * s_tt[(k, k)];
        floored(hh / n, floor_y, &mut hit)
    });

    // Noise variances at the updated loadings.
    let ax = hcat(&w, &w_perp);
    let ay = hcat(&c, &c_perp);
    let (sq_x, sq_y) = (amb.sq_norm_x, amb.sq_norm_y);
    let tr_ee = sq_x - 2.0 * (frob_dot(&w, &xt_t) + frob_dot(&w_perp, &xt_to))
        + frob_dot(&ax.tr_mul(&ax), &m.s_x_latent());
    let tr_ff = sq_y - 2.0 * (frob_dot(&c, &yt_u) + frob_dot(&c_perp, &yt_uo))
        + frob_dot(&ay.tr_mul(&ay), &m.s_y_latent());
    let sigma_e2 = floored(tr_ee / (n * p as f64), floor_x, &mut hit);
    let sigma_f2 = floored(tr_ff / (n * q as f64), floor_y, &mut hit);

    Ok(StepOutcome {
        theta: ModelParams {
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
        },
        floor_hit: hit,
    })
}

fn variance_floors(amb: &Ambient, n: usize) -> (f64, f64) {
    let n = n as f64;
    (
        VARIANCE_FLOOR * amb.sq_norm_x / (n * amb.p as f64),
        VARIANCE_FLOOR * amb.sq_norm_y / (n * amb.q as f64),
    )
}

/// One full ECM sweep from θ.
pub fn em_step(theta: &ModelParams, data: &DataPair) -> Result<ModelParams> {
    theta.validate()?;
    let amb = Ambient::of(data);
    let m = posterior(theta, data)?.into_moments(theta);
    Ok(maximize(theta, &m, data, &amb, variance_floors(&amb, data.n()))?.theta)
}

/// Runs ECM from the configured start until the relative log-likelihood
/// change drops below `tol` or `max_iter` sweeps are done.
pub fn fit(data: &DataPair, ranks: RankSpec, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let theta0 = initialize(data, ranks, config)?;
    fit_from(data, theta0, config)
}

/// Orthonormal bases for running a fit in the span of the data and the
/// starting loadings.
///
/// Every ECM update of `W` and `W⊥` is a combination of the columns of `Xᵀ`
/// and of the current loadings, so the iterates never leave
/// `span(Xᵀ, W₀, W⊥₀)`. When that span is smaller than `p`, the fit runs on
/// `XQ` with loadings `QᵀW` and is mapped back at the end; the same holds for
/// `Y`. The result is identical up to rounding.
struct Reduction {
    qx: Option<DMatrix<f64>>,
    qy: Option<DMatrix<f64>>,
}

fn span_basis(data_t: &DMatrix<f64>, joint: &DMatrix<f64>, specific: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let dim = data_t.ncols() + joint.ncols() + specific.ncols();
    if dim >= data_t.nrows() {
        return None;
    }
    let mut basis = hcat(data_t, joint);
    basis = hcat(&basis, specific);
    Some(basis.qr().q())
}

impl Reduction {
    fn new(data: &DataPair, start: &ModelParams) -> Self {
        Self {
            qx: span_basis(&data.x.transpose(), &start.w, &start.w_perp),
            qy: span_basis(&data.y.transpose(), &start.c, &start.c_perp),
        }
    }

    fn project(&self, data: &DataPair, theta: ModelParams) -> (Option<DataPair>, ModelParams) {
        if self.qx.is_none() && self.qy.is_none() {
            return (None, theta);
        }
        let mut theta = theta;
        let mut x = None;
        let mut y = None;
        if let Some(q) = &self.qx {
            x = Some(&data.x * q);
            theta.w = q.tr_mul(&theta.w);
            theta.w_perp = q.tr_mul(&theta.w_perp);
        }
        if let Some(q) = &self.qy {
            y = Some(&data.y * q);
            theta.c = q.tr_mul(&theta.c);
            theta.c_perp = q.tr_mul(&theta.c_perp);
        }
        let work = DataPair {
            x: x.unwrap_or_else(|| data.x.clone()),
            y: y.unwrap_or_else(|| data.y.clone()),
        };
        (Some(work), theta)
    }

    fn lift(&self, mut theta: ModelParams) -> ModelParams {
        if let Some(q) = &self.qx {
            theta.w = q * &theta.w;
            theta.w_perp = q * &theta.w_perp;
        }
        if let Some(q) = &self.qy {
            theta.c = q * &theta.c;
            theta.c_perp = q * &theta.c_perp;
        }
        theta
    }
}

/// ECM iterations from a given starting point.
pub fn fit_from(data: &DataPair, start: ModelParams, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    start.validate()?;
    let ranks = start.ranks();
    data.check_dims(ranks.p, ranks.q)?;
    check_sample_size(data, &ranks)?;
    let amb = Ambient::of(data);
    let floors = variance_floors(&amb, data.n());

    let reduction = Reduction::new(data, &start);
    let (reduced, mut theta) = reduction.project(data, start);
    let work = reduced.as_ref().unwrap_or(data);

    let mut post = posterior_in(&theta, work, &amb)?;
    let mut prev = post.loglik;
    let mut trace = Vec::new();
    if config.record_trace {
        trace.push(prev);
    }
    let mut floor_hit = false;
    let mut converged = false;
    let mut n_iter = 0;

    while n_iter < config.max_iter {
        let moments = post.into_moments(&theta);
        let step = maximize(&theta, &moments, work, &amb, floors)?;
        floor_hit |= step.floor_hit;
        theta = step.theta;
        n_iter += 1;
        post = posterior_in(&theta, work, &amb)?;
        let current = post.loglik;
        if !current.is_finite() {
            return Err(Error::InvalidParams(format!(
                "log-likelihood became non-finite at sweep {n_iter}"
            )));
        }
        if config.record_trace {
            trace.push(current);
        }
        let change = (current - prev).abs();
        prev = current;
        if change <= config.tol * current.abs() {
            converged = true;
            break;
        }
    }
    drop(post);

    let theta = validate_and_normalize(reduction.lift(theta))?;
    let post = posterior(&theta, data)?;
    let loglik = post.loglik;
    if !config.record_trace {
        trace.push(loglik);
    }
    Ok(FitResult {
        final_moments: post.into_moments(&theta),
        theta,
        loglik_trace: trace,
        loglik,
        n_iter,
        converged,
        variance_floor_hit: floor_hit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::log_likelihood;
    use crate::model::sample;

    fn simulated(ranks: RankSpec, n: usize, seed: u64) -> (ModelParams, DataPair) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = ModelParams::random(ranks, &mut rng).unwrap();
        let s = sample(&theta, n, seed ^ 0xabc).unwrap();
        (theta, DataPair::new(s.x, s.y).unwrap())
    }

    #[test]
    fn reduced_basis_matches_full_sweeps() {
        // p and q both exceed N + r + r_x, so both blocks are reduced.
        let ranks = RankSpec::new(30, 25, 2, 1, 1).unwrap();
        let (_, data) = simulated(ranks, 12, 21);
        let config = FitConfig {
            max_iter: 6,
            tol: 1e-300,
            ..FitConfig::default()
        };
        let start = initialize(&data, ranks, &config).unwrap();
        let res = fit_from(&data, start.clone(), &config).unwrap();
        let mut theta = start;
        let mut trace = vec![log_likelihood(&theta, &data).unwrap()];
        for _ in 0..6 {
            theta = em_step(&theta, &data).unwrap();
            trace.push(log_likelihood(&theta, &data).unwrap());
        }
        assert_eq!(res.loglik_trace.len(), trace.len());
        for (a, b) in res.loglik_trace.iter().zip(&trace) {
            assert!((a - b).abs() <= 1e-9 * b.abs(), "{a} vs {b}");
        }
        let theta = validate_and_normalize(theta).unwrap();
        assert!((&res.theta.w - &theta.w).norm() < 1e-7);
        assert!((&res.theta.c_perp - &theta.c_perp).norm() < 1e-7);
    }

    #[test]
    fn sample_size_boundary() {
        let ranks = RankSpec::new(10, 6, 2, 1, 1).unwrap();
        let (_, data) = simulated(ranks, 3, 1);
        assert!(matches!(
            initialize(&data, ranks, &FitConfig::default()),
            Err(Error::RanksExceedSampleSize { n: 3, needed: 4 })
        ));
    }

    #[test]
    fn degenerate_data_rejected() {
        let ranks = RankSpec::new(10, 6, 2, 1, 1).unwrap();
        let data = DataPair::new(DMatrix::zeros(20, 10), DMatrix::zeros(20, 6)).unwrap();
        assert!(matches!(
            initialize(&data, ranks, &FitConfig::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn random_init_is_deterministic_and_valid() {
        let ranks = RankSpec::new(10, 6, 2, 1, 1).unwrap();
        let (_, data) = simulated(ranks, 40, 2);
        let cfg = FitConfig {
            init: InitStrategy::Random(7),
            ..FitConfig::default()
        };
        let a = initialize(&data, ranks, &cfg).unwrap();
        let b = initialize(&data, ranks, &cfg).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(a.b.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn step_keeps_loadings_orthonormal_and_ascends() {
        let ranks = RankSpec::new(12, 7, 2, 2, 1).unwrap();
        let (_, data) = simulated(ranks, 60, 3);
        let mut theta = initialize(&data, ranks, &FitConfig::default()).unwrap();
        let mut ll = log_likelihood(&theta, &data).unwrap();
        for _ in 0..20 {
            theta = em_step(&theta, &data).unwrap();
            for m in [&theta.w, &theta.w_perp, &theta.c, &theta.c_perp] {
                assert!(crate::linalg::orthonormality_defect(m) < 1e-10);
            }
            let next = log_likelihood(&theta, &data).unwrap();
            assert!(next >= ll - 1e-8 * ll.abs(), "{next} < {ll}");
            ll = next;
        }
    }

    #[test]
    fn no_specific_components() {
        let ranks = RankSpec::new(8, 5, 2, 0, 0).unwrap();
        let (_, data) = simulated(ranks, 50, 4);
        let theta = initialize(&data, ranks, &FitConfig::default()).unwrap();
        let next = em_step(&theta, &data).unwrap();
        assert_eq!(next.w_perp.shape(), (8, 0));
        assert_eq!(next.c_perp.shape(), (5, 0));
        assert!(log_likelihood(&next, &data).unwrap() >= log_likelihood(&theta, &data).unwrap());
    }

    #[test]
    fn infinite_tolerance_stops_after_one_sweep() {
        let ranks = RankSpec::new(8, 5, 1, 1, 1).unwrap();
        let (_, data) = simulated(ranks, 40, 5);
        let cfg = FitConfig {
            tol: f64::INFINITY,
            ..FitConfig::default()
        };
        let res = fit(&data, ranks, &cfg).unwrap();
        assert_eq!(res.n_iter, 1);
        assert!(res.converged);
        assert_eq!(res.loglik_trace.len(), 2);
    }

    #[test]
    fn invalid_config_rejected() {
        let ranks = RankSpec::new(8, 5, 1, 1, 1).unwrap();
        let (_, data) = simulated(ranks, 40, 6);
        let cfg = FitConfig {
            max_iter: 0,
            ..FitConfig::default()
        };
        assert!(matches!(fit(&data, ranks, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn fit_is_deterministic() {
        let ranks = RankSpec::new(10, 6, 2, 1, 1).unwrap();
        let (_, data) = simulated(ranks, 80, 7);
        let cfg = FitConfig::default();
        let a = fit(&data, ranks, &cfg).unwrap();
        let b = fit(&data, ranks, &cfg).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.loglik_trace, b.loglik_trace);
    }
}
