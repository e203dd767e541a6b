//! Gaussian conditioning of the latent variables on observed data.
//!
//! Every quantity here is computed in the k-dimensional latent space
//! (k = 2r + r_x + r_y). The `(x, y)` covariance is never materialized; the
//! Woodbury identity and the matrix-determinant lemma reduce all work to
//! O(N(p+q)k + k³) time and O((p+q)k + Nk) memory.
//!
//! Internally the latents are reparameterized as `z = (t, h, t⊥, u⊥)`, which
//! has a diagonal covariance even when `Σ_h` is singular. With `S = Σ_z^{1/2}`
//! and `G = A_zᵀ D⁻¹ A_z`, the posterior covariance is `S (I + S G S)⁻¹ S`,
//! which stays well defined as any variance tends to zero.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::DataPair;
use crate::error::{Error, Result};
use crate::linalg::{frob_dot, hcat, symmetrize};
use crate::model::{ModelParams, RankSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Semi-orthogonal factor of a full-rank matrix.
///
/// With `A = U D Vᵀ` this returns the polar factor `U Vᵀ = A (AᵀA)^{-1/2}`,
/// the semi-orthogonal matrix closest to `A` and the maximizer of
/// `tr(Ŵᵀ A)` over `ŴᵀŴ = I`. Columns keep their correspondence with the
/// columns of `A`.
pub fn orth(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, k) = a.shape();
    if k == 0 {
        return Ok(DMatrix::zeros(p, 0));
    }
    if k > p {
        return Err(Error::RankDeficient {
            smallest: 0.0,
            largest: 0.0,
        });
    }
    let svd = a.clone().svd(true, true);
    let s = &svd.singular_values;
    let largest = s.max();
    let smallest = s.min();
    if !(smallest > k as f64 * f64::EPSILON * largest) {
        return Err(Error::RankDeficient { smallest, largest });
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    Ok(u * v_t)
}

/// Conditional moments of `s = (t, u, t⊥, u⊥)` given the data.
///
/// Second-moment aggregates are sums over rows: `E[SᵀS | X, Y] =
/// N·Cov(s | x, y) + E[S]ᵀE[S]`, where the posterior covariance is shared
/// by all rows.
#[derive(Debug, Clone)]
pub struct LatentMoments {
    pub ranks: RankSpec,
    pub n: usize,
    pub mean_t: DMatrix<f64>,
    pub mean_u: DMatrix<f64>,
    pub mean_to: DMatrix<f64>,
    pub mean_uo: DMatrix<f64>,
    /// k×k posterior covariance of `s` (identical across rows).
    pub posterior_cov: DMatrix<f64>,
    /// k×k aggregate `E[SᵀS | X, Y]` in `(t, u, t⊥, u⊥)` order.
    pub second_moment: DMatrix<f64>,
    /// `E[HᵀH | X, Y]` with `H = U − TB` for the θ used.
    pub s_hh: DMatrix<f64>,
    /// `E‖X − TWᵀ − T⊥W⊥ᵀ‖²_F` given the data.
    pub tr_ee: f64,
    /// `E‖Y − UCᵀ − U⊥C⊥ᵀ‖²_F` given the data.
    pub tr_ff: f64,
}

impl LatentMoments {
    fn block(&self, a: usize, a_len: usize, b: usize, b_len: usize) -> DMatrix<f64> {
        self.second_moment.view((a, b), (a_len, b_len)).into_owned()
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let RankSpec { r, rx, .. } = self.ranks;
        (0, r, 2 * r, 2 * r + rx)
    }

    pub fn s_tt(&self) -> DMatrix<f64> {
        let (t, ..) = self.offsets();
        self.block(t, self.ranks.r, t, self.ranks.r)
    }

    /// `E[UᵀT]`.
    pub fn s_ut(&self) -> DMatrix<f64> {
        let (t, u, ..) = self.offsets();
        self.block(u, self.ranks.r, t, self.ranks.r)
    }

    pub fn s_uu(&self) -> DMatrix<f64> {
        let (_, u, ..) = self.offsets();
        self.block(u, self.ranks.r, u, self.ranks.r)
    }

    pub fn s_toto(&self) -> DMatrix<f64> {
        let (_, _, to, _) = self.offsets();
        self.block(to, self.ranks.rx, to, self.ranks.rx)
    }

    pub fn s_uouo(&self) -> DMatrix<f64> {
        let (.., uo) = self.offsets();
        self.block(uo, self.ranks.ry, uo, self.ranks.ry)
    }

    /// `E[TᵀT⊥]`.
    pub fn s_t_to(&self) -> DMatrix<f64> {
        let (t, _, to, _) = self.offsets();
        self.block(t, self.ranks.r, to, self.ranks.rx)
    }

    /// `E[UᵀU⊥]`.
    pub fn s_u_uo(&self) -> DMatrix<f64> {
        let (_, u, _, uo) = self.offsets();
        self.block(u, self.ranks.r, uo, self.ranks.ry)
    }

    /// Second moments of the x-side latents `(t, t⊥)`.
    pub(crate) fn s_x_latent(&self) -> DMatrix<f64> {
        let RankSpec { r, rx, .. } = self.ranks;
        let idx: Vec<usize> = (0..r).chain(2 * r..2 * r + rx).collect();
        self.second_moment.select_rows(&idx).select_columns(&idx)
    }

    /// Second moments of the y-side latents `(u, u⊥)`.
    pub(crate) fn s_y_latent(&self) -> DMatrix<f64> {
        let RankSpec { r, rx, ry, .. } = self.ranks;
        let idx: Vec<usize> = (r..2 * r).chain(2 * r + rx..2 * r + rx + ry).collect();
        self.second_moment.select_rows(&idx).select_columns(&idx)
    }
}

/// Dimensions and squared norms of the observed data. They differ from the
/// working data when a fit runs in a reduced basis for `X` or `Y`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ambient {
    pub p: usize,
    pub q: usize,
    pub sq_norm_x: f64,
    pub sq_norm_y: f64,
}

impl Ambient {
    pub(crate) fn of(data: &DataPair) -> Self {
        let (sq_norm_x, sq_norm_y) = data.sq_norms();
        Self {
            p: data.p(),
            q: data.q(),
            sq_norm_x,
            sq_norm_y,
        }
    }
}

/// Intermediate E-step quantities shared by the moment and likelihood paths.
pub(crate) struct Posterior {
    pub ranks: RankSpec,
    pub n: usize,
    /// N×k conditional means of `s`.
    pub means: DMatrix<f64>,
    /// k×k shared posterior covariance of `s`.
    pub cov: DMatrix<f64>,
    /// `X [W W⊥]` (N×(r+r_x)).
    pub proj_x: DMatrix<f64>,
    /// `Y [C C⊥]` (N×(r+r_y)).
    pub proj_y: DMatrix<f64>,
    pub sq_norm_x: f64,
    pub sq_norm_y: f64,
    pub loglik: f64,
}

/// Maps `z = (t, h, t⊥, u⊥)` to `s = (t, u, t⊥, u⊥)` (u = tB + h).
fn z_to_s(theta: &ModelParams) -> DMatrix<f64> {
    let RankSpec { r, rx, ry, .. } = theta.ranks();
    let k = 2 * r + rx + ry;
    let mut l = DMatrix::identity(k, k);
    for i in 0..r {
        l[(r + i, i)] = theta.b[i];
    }
    l
}

pub(crate) fn posterior(theta: &ModelParams, data: &DataPair) -> Result<Posterior> {
    posterior_in(theta, data, &Ambient::of(data))
}

/// Posterior for working data whose columns may span a reduced basis of the
/// ambient space described by `amb`.
pub(crate) fn posterior_in(theta: &ModelParams, data: &DataPair, amb: &Ambient) -> Result<Posterior> {
    let ranks = theta.ranks();
    data.check_dims(ranks.p, ranks.q)?;
    let RankSpec { r, rx, ry, .. } = ranks;
    let (p, q) = (amb.p, amb.q);
    let k = 2 * r + rx + ry;
    let n = data.n();

    let ax = hcat(&theta.w, &theta.w_perp);
    let ay = hcat(&theta.c, &theta.c_perp);

    // Selection maps from z to the x-side latents (t, t⊥) and y-side (u, u⊥).
    let mut lx = DMatrix::zeros(r + rx, k);
    for i in 0..r {
        lx[(i, i)] = 1.0;
    }
    for i in 0..rx {
        lx[(r + i, 2 * r + i)] = 1.0;
    }
    let mut ly = DMatrix::zeros(r + ry, k);
    for i in 0..r {
        ly[(i, i)] = theta.b[i];
        ly[(i, r + i)] = 1.0;
    }
    for i in 0..ry {
        ly[(r + i, 2 * r + rx + i)] = 1.0;
    }

    let inv_e = 1.0 / theta.sigma_e2;
    let inv_f = 1.0 / theta.sigma_f2;
    let gx = ax.tr_mul(&ax);
    let gy = ay.tr_mul(&ay);
    let g = lx.tr_mul(&(gx * &lx)) * inv_e + ly.tr_mul(&(gy * &ly)) * inv_f;

    let sd: DVector<f64> = DVector::from_iterator(
        k,
        theta
            .sigma_t2
            .iter()
            .chain(theta.sigma_h2.iter())
            .chain(theta.sigma_to2.iter())
            .chain(theta.sigma_uo2.iter())
            .map(|v| v.sqrt()),
    );
    let mut kmat = DMatrix::identity(k, k);
    for i in 0..k {
        for j in 0..k {
            kmat[(i, j)] += sd[i] * g[(i, j)] * sd[j];
        }
    }
    symmetrize(&mut kmat);
    let chol: Cholesky<f64, Dyn> =
        Cholesky::new(kmat).ok_or(Error::SingularLatentCovariance)?;
    let logdet_k: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut post_z = chol.inverse();
    for i in 0..k {
        for j in 0..k {
            post_z[(i, j)] *= sd[i] * sd[j];
        }
    }
    symmetrize(&mut post_z);

    let proj_x = &data.x * &ax;
    let proj_y = &data.y * &ay;
    // Rows of v D⁻¹ A_z.
    let rhs = (&proj_x * inv_e) * &lx + (&proj_y * inv_f) * &ly;
    let means_z = &rhs * &post_z;

    let (sq_norm_x, sq_norm_y) = (amb.sq_norm_x, amb.sq_norm_y);
    let quad = sq_norm_x * inv_e + sq_norm_y * inv_f - frob_dot(&rhs, &means_z);
    let nf = n as f64;
    let logdet = p as f64 * theta.sigma_e2.ln() + q as f64 * theta.sigma_f2.ln() + logdet_k;
    let loglik = -0.5 * (nf * ((p + q) as f64 * LN_2PI + logdet) + quad);

    let l = z_to_s(theta);
    let means = means_z * l.transpose();
    let mut cov = &l * post_z * l.transpose();
    symmetrize(&mut cov);

    Ok(Posterior {
        ranks,
        n,
        means,
        cov,
        proj_x,
        proj_y,
        sq_norm_x,
        sq_norm_y,
        loglik,
    })
}

impl Posterior {
    pub(crate) fn into_moments(self, theta: &ModelParams) -> LatentMoments {
        let RankSpec { r, rx, ry, .. } = self.ranks;
        let nf = self.n as f64;
        let mut second = &self.cov * nf + self.means.tr_mul(&self.means);
        symmetrize(&mut second);

        let cols = |start: usize, len: usize| self.means.columns(start, len).into_owned();
        let mean_t = cols(0, r);
        let mean_u = cols(r, r);
        let mean_to = cols(2 * r, rx);
        let mean_uo = cols(2 * r + rx, ry);

        let ax = hcat(&theta.w, &theta.w_perp);
        let ay = hcat(&theta.c, &theta.c_perp);
        let mean_x = hcat(&mean_t, &mean_to);
        let mean_y = hcat(&mean_u, &mean_uo);

        let mut out = LatentMoments {
            ranks: self.ranks,
            n: self.n,
            mean_t,
            mean_u,
            mean_to,
            mean_uo,
            posterior_cov: self.cov,
            second_moment: second,
            s_hh: DMatrix::zeros(r, r),
            tr_ee: 0.0,
            tr_ff: 0.0,
        };
        out.tr_ee = self.sq_norm_x - 2.0 * frob_dot(&self.proj_x, &mean_x)
            + frob_dot(&ax.tr_mul(&ax), &out.s_x_latent());
        out.tr_ff = self.sq_norm_y - 2.0 * frob_dot(&self.proj_y, &mean_y)
            + frob_dot(&ay.tr_mul(&ay), &out.s_y_latent());
        out.s_hh = residual_second_moment(&out, &theta.b);
        out
    }
}

/// `E[HᵀH] = S_uu − S_ut B − B S_utᵀ + B S_tt B` for a diagonal `B`.
pub fn residual_second_moment(m: &LatentMoments, b: &DVector<f64>) -> DMatrix<f64> {
    let bd = DMatrix::from_diagonal(b);
    let s_ut = m.s_ut();
    let mut out = m.s_uu() - &s_ut * &bd - &bd * s_ut.transpose() + &bd * m.s_tt() * &bd;
    symmetrize(&mut out);
    out
}

/// Exact conditional moments of the latent variables given `(X, Y)`.
pub fn latent_moments(theta: &ModelParams, data: &DataPair) -> Result<LatentMoments> {
    Ok(posterior(theta, data)?.into_moments(theta))
}

/// Observed-data log-likelihood summed over rows.
pub fn log_likelihood(theta: &ModelParams, data: &DataPair) -> Result<f64> {
    Ok(posterior(theta, data)?.loglik)
}

/// Conditional means of `(t, t⊥)` given `x` alone, N×(r+r_x).
fn x_only_latent_means(theta: &ModelParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let RankSpec { p, r, rx, .. } = theta.ranks();
    if x.ncols() != p {
        return Err(Error::DimensionMismatch {
            context: "columns of X",
            expected: p,
            found: x.ncols(),
        });
    }
    let ax = hcat(&theta.w, &theta.w_perp);
    let m = r + rx;
    let sd: Vec<f64> = theta
        .sigma_t2
        .iter()
        .chain(theta.sigma_to2.iter())
        .map(|v| v.sqrt())
        .collect();
    let inv_e = 1.0 / theta.sigma_e2;
    let g = ax.tr_mul(&ax);
    let mut kmat = DMatrix::identity(m, m);
    for i in 0..m {
        for j in 0..m {
            kmat[(i, j)] += sd[i] * g[(i, j)] * sd[j] * inv_e;
        }
    }
    symmetrize(&mut kmat);
    let mut post = Cholesky::new(kmat)
        .ok_or(Error::SingularLatentCovariance)?
        .inverse();
    for i in 0..m {
        for j in 0..m {
            post[(i, j)] *= sd[i] * sd[j];
        }
    }
    Ok((x * &ax) * (post * inv_e))
}

/// `E[y | x]` under the model, N×q.
pub fn predict_y_from_x(theta: &ModelParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = theta.ranks().r;
    let means = x_only_latent_means(theta, x)?;
    let mut u_hat = means.columns(0, r).into_owned();
    for k in 0..r {
        u_hat.column_mut(k).scale_mut(theta.b[k]);
    }
    Ok(u_hat * theta.c.transpose())
}

/// Conditional-mean scores `(T̂, Û, T̂⊥, Û⊥)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub t: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub t_perp: DMatrix<f64>,
    pub u_perp: DMatrix<f64>,
}

pub fn predict_scores(theta: &ModelParams, data: &DataPair) -> Result<Scores> {
    let m = latent_moments(theta, data)?;
    Ok(Scores {
        t: m.mean_t,
        u: m.mean_u,
        t_perp: m.mean_to,
        u_perp: m.mean_uo,
    })
}

/// Scores from `x` alone: `T̂ = E[t | x]`, `T̂⊥ = E[t⊥ | x]`, `Û = T̂B` and
/// `Û⊥ = 0`.
pub fn predict_scores_from_x(theta: &ModelParams, x: &DMatrix<f64>) -> Result<Scores> {
    let RankSpec { r, rx, ry, .. } = theta.ranks();
    let means = x_only_latent_means(theta, x)?;
    let t = means.columns(0, r).into_owned();
    let mut u = t.clone();
    for k in 0..r {
        u.column_mut(k).scale_mut(theta.b[k]);
    }
    Ok(Scores {
        t,
        u,
        t_perp: means.columns(r, rx).into_owned(),
        u_perp: DMatrix::zeros(x.nrows(), ry),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample, RankSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ModelParams, DataPair) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = ModelParams::random(RankSpec::new(8, 5, 2, 1, 1).unwrap(), &mut rng).unwrap();
        let s = sample(&theta, 20, seed + 1).unwrap();
        (theta, DataPair::new(s.x, s.y).unwrap())
    }

    #[test]
    fn orth_hand_example() {
        let a = DMatrix::from_row_slice(3, 2, &[0.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let o = orth(&a).unwrap();
        let expected = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!((o - expected).norm() < 1e-14);
    }

    #[test]
    fn orth_keeps_semi_orthogonal_input() {
        let a = DMatrix::from_row_slice(3, 2, &[0.6, 0.0, 0.8, 0.0, 0.0, 1.0]);
        let o = orth(&a).unwrap();
        for j in 0..2 {
            let d = o.column(j).dot(&a.column(j)).abs();
            assert!((d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orth_rejects_rank_deficient_input() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(orth(&a), Err(Error::RankDeficient { .. })));
        assert_eq!(orth(&DMatrix::zeros(4, 0)).unwrap().shape(), (4, 0));
    }

    #[test]
    fn zero_data_gives_zero_means() {
        let (theta, data) = setup(1);
        let zero = DataPair::new(
            DMatrix::zeros(data.n(), data.p()),
            DMatrix::zeros(data.n(), data.q()),
        )
        .unwrap();
        let m = latent_moments(&theta, &zero).unwrap();
        assert!(m.mean_t.iter().chain(m.mean_u.iter()).all(|&v| v == 0.0));
        let expected = &m.posterior_cov * data.n() as f64;
        assert!((m.second_moment - expected).norm() < 1e-12);
        let scores = predict_scores(&theta, &zero).unwrap();
        assert!(scores.t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn null_effect_decouples_u_from_x() {
        let (mut theta, data) = setup(2);
        theta.b.fill(0.0);
        let base = latent_moments(&theta, &data).unwrap();
        let mut shifted = data.clone();
        shifted.x.add_scalar_mut(0.7);
        let moved = latent_moments(&theta, &shifted).unwrap();
        assert!((base.mean_u - moved.mean_u).norm() < 1e-12);
        assert!((base.mean_t - moved.mean_t).norm() > 1e-3);
    }

    #[test]
    fn residual_moment_identity() {
        let (theta, data) = setup(3);
        let m = latent_moments(&theta, &data).unwrap();
        let b = DMatrix::from_diagonal(&theta.b);
        let manual = m.s_uu() - m.s_ut() * &b - &b * m.s_ut().transpose() + &b * m.s_tt() * &b;
        assert!((manual - &m.s_hh).norm() < 1e-10);
    }

    #[test]
    fn single_zero_row_loglik() {
        let (theta, _) = setup(4);
        let zero = DataPair::new(DMatrix::zeros(1, 8), DMatrix::zeros(1, 5)).unwrap();
        let ll = log_likelihood(&theta, &zero).unwrap();
        let dense = crate::model::implied_covariance(&theta).unwrap().dense();
        let logdet = dense.cholesky().unwrap().l().diagonal().map(|v| v.ln()).sum() * 2.0;
        let expected = -0.5 * (13.0 * LN_2PI + logdet);
        assert!((ll - expected).abs() < 1e-10 * expected.abs());
    }

    #[test]
    fn stacking_data_doubles_loglik() {
        let (theta, data) = setup(5);
        let n = data.n();
        let rows: Vec<usize> = (0..n).chain(0..n).collect();
        let doubled = data.select_rows(&rows);
        let a = log_likelihood(&theta, &data).unwrap();
        let b = log_likelihood(&theta, &doubled).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-10 * a.abs());
    }

    #[test]
    fn zero_effect_predicts_zero() {
        let (mut theta, data) = setup(6);
        theta.b.fill(0.0);
        let yhat = predict_y_from_x(&theta, &data.x).unwrap();
        assert!(yhat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_shrinks_with_noise() {
        let (mut theta, data) = setup(7);
        let mut last = f64::INFINITY;
        for s2 in [1.0, 10.0, 100.0, 1000.0] {
            theta.sigma_e2 = s2;
            let norm = predict_y_from_x(&theta, &data.x).unwrap().norm();
            assert!(norm < last);
            last = norm;
        }
        assert!(last < 0.05);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (theta, data) = setup(8);
        let bad = DataPair::new(data.x.columns(0, 7).into_owned(), data.y.clone()).unwrap();
        assert!(matches!(
            latent_moments(&theta, &bad),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(predict_y_from_x(&theta, &bad.x).is_err());
    }
}
