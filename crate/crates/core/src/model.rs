//! Parameter space of the two-way orthogonal latent model
//!
//! ```text
//! x = t Wᵀ + t⊥ W⊥ᵀ + e,   y = u Cᵀ + u⊥ C⊥ᵀ + f,   u = t B + h
//! ```
//!
//! with diagonal latent covariances, diagonal `B` and isotropic noise.
//! This module holds the parameter container, its canonical form, the
//! implied covariance of `(x, y)` and a sampler for the generative model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::orth;
use crate::error::{Error, Result};
use crate::linalg::{argmax_abs, hcat, orthonormality_defect, top_svd};

/// Semi-orthogonality tolerance for loadings (Frobenius norm of `AᵀA − I`).
pub const ORTHO_TOL: f64 = 1e-10;

/// Dimensions of the two data blocks and the component counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankSpec {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    #[serde(rename = "r_x")]
    pub rx: usize,
    #[serde(rename = "r_y")]
    pub ry: usize,
}

impl RankSpec {
    pub fn new(p: usize, q: usize, r: usize, rx: usize, ry: usize) -> Result<Self> {
        let ranks = Self { p, q, r, rx, ry };
        ranks.validate()?;
        Ok(ranks)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::InvalidRanks("r must be at least 1".into()));
        }
        if self.r + self.rx >= self.p {
            return Err(Error::InvalidRanks(format!(
                "r + r_x = {} must be below p = {}",
                self.r + self.rx,
                self.p
            )));
        }
        if self.r + self.ry >= self.q {
            return Err(Error::InvalidRanks(format!(
                "r + r_y = {} must be below q = {}",
                self.r + self.ry,
                self.q
            )));
        }
        Ok(())
    }

    /// Number of latent variables `(t, u, t⊥, u⊥)`.
    pub fn latent_dim(&self) -> usize {
        2 * self.r + self.rx + self.ry
    }

    /// Smallest sample size the estimator accepts.
    pub fn min_sample_size(&self) -> usize {
        self.r + self.rx.max(self.ry) + 1
    }
}

/// All model parameters. Diagonal matrices are stored as vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w: DMatrix<f64>,
    pub w_perp: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_perp: DMatrix<f64>,
    pub b: DVector<f64>,
    pub sigma_t2: DVector<f64>,
    pub sigma_to2: DVector<f64>,
    pub sigma_uo2: DVector<f64>,
    pub sigma_h2: DVector<f64>,
    pub sigma_e2: f64,
    pub sigma_f2: f64,
}

impl ModelParams {
    /// Ranks read off the matrix shapes. Does not check consistency.
    pub fn ranks(&self) -> RankSpec {
        RankSpec {
            p: self.w.nrows(),
            q: self.c.nrows(),
            r: self.w.ncols(),
            rx: self.w_perp.ncols(),
            ry: self.c_perp.ncols(),
        }
    }

    /// Diagonal of `Σ_u = B Σ_t B + Σ_h`.
    pub fn sigma_u2(&self) -> DVector<f64> {
        self.b
            .component_mul(&self.b)
            .component_mul(&self.sigma_t2)
            + &self.sigma_h2
    }

    pub fn check_shapes(&self) -> Result<()> {
        let rk = self.ranks();
        let checks: [(&'static str, usize, usize); 10] = [
            ("W_perp rows", rk.p, self.w_perp.nrows()),
            ("C columns", rk.r, self.c.ncols()),
            ("C_perp rows", rk.q, self.c_perp.nrows()),
            ("B length", rk.r, self.b.len()),
            ("sigma_t2 length", rk.r, self.sigma_t2.len()),
            ("sigma_h2 length", rk.r, self.sigma_h2.len()),
            ("sigma_to2 length", rk.rx, self.sigma_to2.len()),
            ("sigma_uo2 length", rk.ry, self.sigma_uo2.len()),
            ("W rows", rk.p, self.w.nrows()),
            ("C rows", rk.q, self.c.nrows()),
        ];
        for (context, expected, found) in checks {
            if expected != found {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    found,
                });
            }
        }
        rk.validate()
    }

    fn check_variances(&self) -> Result<()> {
        let strict: [(&'static str, &[f64]); 3] = [
            ("sigma_t2", self.sigma_t2.as_slice()),
            ("sigma_to2", self.sigma_to2.as_slice()),
            ("sigma_uo2", self.sigma_uo2.as_slice()),
        ];
        for (name, vals) in strict {
            if let Some(&v) = vals.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::NonPositiveVariance { name, value: v });
            }
        }
        // Σ_h = 0 is the degenerate u = tB case used by the SIFA-style scenarios.
        if let Some(&v) = self
            .sigma_h2
            .iter()
            .find(|v| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::NonPositiveVariance {
                name: "sigma_h2",
                value: v,
            });
        }
        for (name, v) in [("sigma_e2", self.sigma_e2), ("sigma_f2", self.sigma_f2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::NonPositiveVariance { name, value: v });
            }
        }
        if let Some(&v) = self.b.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite B entry {v}")));
        }
        Ok(())
    }

    fn check_loadings(&self) -> Result<()> {
        let blocks: [(&'static str, &DMatrix<f64>); 4] = [
            ("W", &self.w),
            ("W_perp", &self.w_perp),
            ("C", &self.c),
            ("C_perp", &self.c_perp),
        ];
        for (block, m) in blocks {
            let deviation = orthonormality_defect(m);
            if !(deviation <= ORTHO_TOL) {
                return Err(Error::NonOrthogonalLoadings { block, deviation });
            }
        }
        for (block, a, b) in [
            ("[W W_perp]", &self.w, &self.w_perp),
            ("[C C_perp]", &self.c, &self.c_perp),
        ] {
            if b.ncols() == 0 {
                continue;
            }
            let cat = hcat(a, b);
            let (_, s, _) = top_svd(&cat, cat.ncols());
            let smallest = s.last().copied().unwrap_or(0.0);
            if smallest < 1e-8 {
                return Err(Error::RankDeficientConcatenation { block });
            }
        }
        Ok(())
    }

    /// Checks every invariant except the canonical sign/order convention.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        self.check_variances()?;
        self.check_loadings()
    }

    /// Joint latent covariance of `s = (t, u, t⊥, u⊥)`.
    pub fn latent_covariance(&self) -> DMatrix<f64> {
        let RankSpec { r, rx, ry, .. } = self.ranks();
        let k = 2 * r + rx + ry;
        let mut cov = DMatrix::zeros(k, k);
        let su = self.sigma_u2();
        for i in 0..r {
            cov[(i, i)] = self.sigma_t2[i];
            cov[(r + i, r + i)] = su[i];
            let cross = self.sigma_t2[i] * self.b[i];
            cov[(i, r + i)] = cross;
            cov[(r + i, i)] = cross;
        }
        for i in 0..rx {
            cov[(2 * r + i, 2 * r + i)] = self.sigma_to2[i];
        }
        for i in 0..ry {
            cov[(2 * r + rx + i, 2 * r + rx + i)] = self.sigma_uo2[i];
        }
        cov
    }

    /// Draws a valid parameter set with random semi-orthogonal loadings.
    /// Variances and effects are drawn from moderate ranges; the result is
    /// returned in canonical form.
    pub fn random<R: Rng + ?Sized>(ranks: RankSpec, rng: &mut R) -> Result<Self> {
        ranks.validate()?;
        let gauss = |rng: &mut R, n: usize, m: usize| {
            DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let w = orth(&gauss(rng, ranks.p, ranks.r))?;
        let w_perp = orth(&gauss(rng, ranks.p, ranks.rx))?;
        let c = orth(&gauss(rng, ranks.q, ranks.r))?;
        let c_perp = orth(&gauss(rng, ranks.q, ranks.ry))?;
        let mut uniform_vec =
            |n: usize, lo: f64, hi: f64| DVector::from_fn(n, |_, _| rng.random_range(lo..hi));
        let theta = ModelParams {
            w,
            w_perp,
            c,
            c_perp,
            b: uniform_vec(ranks.r, 0.5, 1.5),
            sigma_t2: uniform_vec(ranks.r, 0.5, 2.0),
            sigma_to2: uniform_vec(ranks.rx, 0.5, 2.0),
            sigma_uo2: uniform_vec(ranks.ry, 0.5, 2.0),
            sigma_h2: uniform_vec(ranks.r, 0.1, 0.5),
            sigma_e2: rng.random_range(0.1..0.5),
            sigma_f2: rng.random_range(0.1..0.5),
        };
        validate_and_normalize(theta)
    }
}

/// `(x, y)` covariance in factored form `A Σ_s Aᵀ + diag(σ²_e I_p, σ²_f I_q)`.
#[derive(Debug, Clone)]
pub struct LowRankCovariance {
    /// (p+q)×k block loading `[[W, 0, W⊥, 0], [0, C, 0, C⊥]]`.
    pub loading: DMatrix<f64>,
    /// k×k covariance of `(t, u, t⊥, u⊥)`.
    pub latent_cov: DMatrix<f64>,
    pub sigma_e2: f64,
    pub sigma_f2: f64,
    pub p: usize,
    pub q: usize,
}

impl LowRankCovariance {
    /// Materializes the full (p+q)×(p+q) matrix. Intended for small
    /// dimensions (tests and diagnostics) only.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut s = &self.loading * &self.latent_cov * self.loading.transpose();
        for i in 0..self.p {
            s[(i, i)] += self.sigma_e2;
        }
        for i in 0..self.q {
            s[(self.p + i, self.p + i)] += self.sigma_f2;
        }
        s
    }

    /// `Cov(x, y)` without forming the full matrix.
    pub fn cross_block(&self) -> DMatrix<f64> {
        let ax = self.loading.rows(0, self.p);
        let ay = self.loading.rows(self.p, self.q);
        ax * &self.latent_cov * ay.transpose()
    }
}

/// Builds the implied covariance of `(x, y)` for a valid θ.
pub fn implied_covariance(theta: &ModelParams) -> Result<LowRankCovariance> {
    theta.validate()?;
    let RankSpec { p, q, r, rx, ry } = theta.ranks();
    let k = 2 * r + rx + ry;
    let mut loading = DMatrix::zeros(p + q, k);
    loading.view_mut((0, 0), (p, r)).copy_from(&theta.w);
    loading.view_mut((0, 2 * r), (p, rx)).copy_from(&theta.w_perp);
    loading.view_mut((p, r), (q, r)).copy_from(&theta.c);
    loading
        .view_mut((p, 2 * r + rx), (q, ry))
        .copy_from(&theta.c_perp);
    Ok(LowRankCovariance {
        loading,
        latent_cov: theta.latent_covariance(),
        sigma_e2: theta.sigma_e2,
        sigma_f2: theta.sigma_f2,
        p,
        q,
    })
}

fn canonical_sign(col: nalgebra::DVectorView<'_, f64>) -> f64 {
    match argmax_abs(col.iter()) {
        Some(i) if col[i] < 0.0 => -1.0,
        _ => 1.0,
    }
}

fn permute_columns(m: &DMatrix<f64>, order: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (dst, &src) in order.iter().enumerate() {
        out.set_column(dst, &m.column(src));
    }
    out
}

fn permute_vec(v: &DVector<f64>, order: &[usize]) -> DVector<f64> {
    DVector::from_iterator(v.len(), order.iter().map(|&i| v[i]))
}

/// Brings θ to canonical form and verifies every invariant.
///
/// Column signs: each column of `W`, `W⊥` and `C⊥` has its largest-magnitude
/// entry positive. Flipping a `W` column flips `t_k` and hence `B_k`; a
/// negative `B_k` is then absorbed by flipping `C`'s column, so `C`'s sign is
/// tied to `W`'s whenever `B_k ≠ 0`. Joint components are ordered by
/// `σ²_t·B` (ties by `σ²_t`, then original index); specific components by
/// variance. The covariance of `(x, y)` is unchanged by all of this.
pub fn validate_and_normalize(theta: ModelParams) -> Result<ModelParams> {
    normalize_impl(theta, false)
}

/// Like [`validate_and_normalize`] but fails with `OrderingViolation` when
/// two joint components have exactly equal `σ²_t·B`.
pub fn validate_and_normalize_strict(theta: ModelParams) -> Result<ModelParams> {
    normalize_impl(theta, true)
}

fn normalize_impl(mut theta: ModelParams, strict: bool) -> Result<ModelParams> {
    theta.check_shapes()?;
    theta.check_variances()?;
    let RankSpec { r, rx, ry, .. } = theta.ranks();

    for k in 0..r {
        if canonical_sign(theta.w.column(k)) < 0.0 {
            theta.w.column_mut(k).neg_mut();
            theta.b[k] = -theta.b[k];
        }
        if theta.b[k] < 0.0 {
            theta.c.column_mut(k).neg_mut();
            theta.b[k] = -theta.b[k];
        } else if theta.b[k] == 0.0 && canonical_sign(theta.c.column(k)) < 0.0 {
            theta.c.column_mut(k).neg_mut();
        }
    }
    for k in 0..rx {
        if canonical_sign(theta.w_perp.column(k)) < 0.0 {
            theta.w_perp.column_mut(k).neg_mut();
        }
    }
    for k in 0..ry {
        if canonical_sign(theta.c_perp.column(k)) < 0.0 {
            theta.c_perp.column_mut(k).neg_mut();
        }
    }

    let strength: Vec<f64> = (0..r).map(|k| theta.sigma_t2[k] * theta.b[k]).collect();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| {
        strength[j]
            .total_cmp(&strength[i])
            .then(theta.sigma_t2[j].total_cmp(&theta.sigma_t2[i]))
            .then(i.cmp(&j))
    });
    if strict {
        for pos in 1..r {
            if strength[order[pos]] == strength[order[pos - 1]] {
                return Err(Error::OrderingViolation { component: pos });
            }
        }
    }
    if order.iter().enumerate().any(|(a, &b)| a != b) {
        theta.w = permute_columns(&theta.w, &order);
        theta.c = permute_columns(&theta.c, &order);
        theta.b = permute_vec(&theta.b, &order);
        theta.sigma_t2 = permute_vec(&theta.sigma_t2, &order);
        theta.sigma_h2 = permute_vec(&theta.sigma_h2, &order);
    }

    let by_variance = |v: &DVector<f64>| {
        let mut o: Vec<usize> = (0..v.len()).collect();
        o.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
        o
    };
    let order_x = by_variance(&theta.sigma_to2);
    theta.w_perp = permute_columns(&theta.w_perp, &order_x);
    theta.sigma_to2 = permute_vec(&theta.sigma_to2, &order_x);
    let order_y = by_variance(&theta.sigma_uo2);
    theta.c_perp = permute_columns(&theta.c_perp, &order_y);
    theta.sigma_uo2 = permute_vec(&theta.sigma_uo2, &order_y);

    theta.check_loadings()?;
    Ok(theta)
}

/// Realized draw from the model: data plus the latent variables behind it.
#[derive(Debug, Clone)]
pub struct SampledData {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub t_perp: DMatrix<f64>,
    pub u_perp: DMatrix<f64>,
}

/// Draws `n` i.i.d. rows `(x, y)` from the model, deterministic in `seed`.
pub fn sample(theta: &ModelParams, n: usize, seed: u64) -> Result<SampledData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(theta, n, &mut rng)
}

pub fn sample_with_rng<R: Rng + ?Sized>(
    theta: &ModelParams,
    n: usize,
    rng: &mut R,
) -> Result<SampledData> {
    theta
        .validate()
        .map_err(|e| Error::InvalidParams(e.to_string()))?;
    if n == 0 {
        return Err(Error::InvalidParams("sample size must be at least 1".into()));
    }
    let RankSpec { p, q, r, rx, ry } = theta.ranks();
    let mut gauss = |cols: usize, sd: &dyn Fn(usize) -> f64| {
        DMatrix::from_fn(n, cols, |_, j| sd(j) * rng.sample::<f64, _>(StandardNormal))
    };
    let t = gauss(r, &|j| theta.sigma_t2[j].sqrt());
    let h = gauss(r, &|j| theta.sigma_h2[j].sqrt());
    let t_perp = gauss(rx, &|j| theta.sigma_to2[j].sqrt());
    let u_perp = gauss(ry, &|j| theta.sigma_uo2[j].sqrt());
    let sd_e = theta.sigma_e2.sqrt();
    let sd_f = theta.sigma_f2.sqrt();
    let e = gauss(p, &|_| sd_e);
    let f = gauss(q, &|_| sd_f);

    let mut u = h;
    for k in 0..r {
        let bk = theta.b[k];
        u.column_mut(k).axpy(bk, &t.column(k), 1.0);
    }
    let mut x = e;
    x.gemm(1.0, &t, &theta.w.transpose(), 1.0);
    x.gemm(1.0, &t_perp, &theta.w_perp.transpose(), 1.0);
    let mut y = f;
    y.gemm(1.0, &u, &theta.c.transpose(), 1.0);
    y.gemm(1.0, &u_perp, &theta.c_perp.transpose(), 1.0);
    Ok(SampledData {
        x,
        y,
        t,
        u,
        t_perp,
        u_perp,
    })
}
