//! Dense Gaussian-conditioning oracle and random instances shared by the
//! integration tests and the acceptance suite.
//!
//! The oracle forms the full joint covariance of the latents and the
//! observed `(x, y)` row and conditions by dense Cholesky solves, sharing
//! no code path with the low-rank routines under test.

#![allow(dead_code)]

use nalgebra::DMatrix;
use po2pls::{DataPair, ModelParams, RankSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Oracle {
    /// N×k posterior means of `s = (t, u, t⊥, u⊥)`.
    pub mean: DMatrix<f64>,
    pub posterior_cov: DMatrix<f64>,
    pub second_moment: DMatrix<f64>,
    pub s_hh: DMatrix<f64>,
    pub tr_ee: f64,
    pub tr_ff: f64,
    pub loglik: f64,
    /// `E[y | x]` for the rows of `x`.
    pub y_hat: DMatrix<f64>,
}

/// Latent covariance built entry by entry from the model definition.
pub fn latent_cov(theta: &ModelParams) -> DMatrix<f64> {
    let RankSpec { r, rx, ry, .. } = theta.ranks();
    let k = 2 * r + rx + ry;
    let mut s = DMatrix::zeros(k, k);
    for i in 0..r {
        let (vt, b, vh) = (theta.sigma_t2[i], theta.b[i], theta.sigma_h2[i]);
        s[(i, i)] = vt;
        s[(i, r + i)] = b * vt;
        s[(r + i, i)] = b * vt;
        s[(r + i, r + i)] = b * b * vt + vh;
    }
    for i in 0..rx {
        s[(2 * r + i, 2 * r + i)] = theta.sigma_to2[i];
    }
    for i in 0..ry {
        s[(2 * r + rx + i, 2 * r + rx + i)] = theta.sigma_uo2[i];
    }
    s
}

/// Loading matrix `A` with `(x, y) = s Aᵀ + noise`.
pub fn loading_matrix(theta: &ModelParams) -> DMatrix<f64> {
    let RankSpec { p, q, r, rx, ry } = theta.ranks();
    let mut a = DMatrix::zeros(p + q, 2 * r + rx + ry);
    a.view_mut((0, 0), (p, r)).copy_from(&theta.w);
    a.view_mut((p, r), (q, r)).copy_from(&theta.c);
    a.view_mut((0, 2 * r), (p, rx)).copy_from(&theta.w_perp);
    a.view_mut((p, 2 * r + rx), (q, ry)).copy_from(&theta.c_perp);
    a
}

/// Dense `(p+q)×(p+q)` covariance of an observed row.
pub fn dense_sigma(theta: &ModelParams) -> DMatrix<f64> {
    let RankSpec { p, q, .. } = theta.ranks();
    let a = loading_matrix(theta);
    let mut sigma = &a * latent_cov(theta) * a.transpose();
    for i in 0..p {
        sigma[(i, i)] += theta.sigma_e2;
    }
    for i in 0..q {
        sigma[(p + i, p + i)] += theta.sigma_f2;
    }
    sigma
}

fn spd_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let chol = m.clone().cholesky().expect("oracle covariance must be SPD");
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    (chol.inverse(), logdet)
}

pub fn oracle(theta: &ModelParams, data: &DataPair) -> Oracle {
    let RankSpec { p, q, r, .. } = theta.ranks();
    let n = data.n();
    let z = DMatrix::from_fn(n, p + q, |i, j| {
        if j < p {
            data.x[(i, j)]
        } else {
            data.y[(i, j - p)]
        }
    });
    let s_cov = latent_cov(theta);
    let a = loading_matrix(theta);
    let sigma = dense_sigma(theta);
    let (sigma_inv, logdet) = spd_inverse(&sigma);

    let gain = &s_cov * a.transpose() * &sigma_inv;
    let posterior_cov = &s_cov - &gain * &a * &s_cov;
    let mean = &z * gain.transpose();
    let second_moment = posterior_cov.scale(n as f64) + mean.transpose() * &mean;

    let k = s_cov.nrows();
    let mut h_map = DMatrix::zeros(k, r);
    for i in 0..r {
        h_map[(i, i)] = -theta.b[i];
        h_map[(r + i, i)] = 1.0;
    }
    let s_hh = h_map.transpose() * &second_moment * &h_map;

    let resid_sq = |rows: std::ops::Range<usize>| {
        let ab = a.rows(rows.start, rows.len()).into_owned();
        let fitted = &mean * ab.transpose();
        let obs = z.columns(rows.start, rows.len());
        let bias = (obs - fitted).norm_squared();
        bias + n as f64 * (&ab * &posterior_cov * ab.transpose()).trace()
    };
    let tr_ee = resid_sq(0..p);
    let tr_ff = resid_sq(p..p + q);

    let quad = (&z * &sigma_inv).component_mul(&z).sum();
    let loglik = -0.5 * (n as f64) * ((p + q) as f64 * (2.0 * std::f64::consts::PI).ln() + logdet)
        - 0.5 * quad;

    let sxx = sigma.view((0, 0), (p, p)).into_owned();
    let syx = sigma.view((p, 0), (q, p)).into_owned();
    let (sxx_inv, _) = spd_inverse(&sxx);
    let y_hat = &data.x * (syx * sxx_inv).transpose();

    Oracle { mean, posterior_cov, second_moment, s_hh, tr_ee, tr_ff, loglik, y_hat }
}

/// `‖a − b‖_F ≤ tol·‖b‖_F`, with a tiny absolute floor for vanishing `b`.
pub fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && (a - b).norm() <= tol * b.norm() + 1e-14
}

pub fn rel_close_scalar(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0e-300)
}

pub fn gauss(rng: &mut impl Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random small instance: p ≤ 10, q ≤ 8, latent dimension ≤ 6, N ≤ 25.
/// Odd seeds draw the data from the model, even seeds use unstructured
/// Gaussian data with a random mean shift.
pub fn small_instance(seed: u64) -> (ModelParams, DataPair) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ranks, k) = loop {
        let p = rng.random_range(3..=10);
        let q = rng.random_range(3..=8);
        let r = rng.random_range(1..=2);
        let rx = rng.random_range(0..=2);
        let ry = rng.random_range(0..=2);
        if let Ok(ranks) = RankSpec::new(p, q, r, rx, ry) {
            let k = ranks.latent_dim();
            if k <= 6 {
                break (ranks, k);
            }
        }
    };
    assert!(k <= 6);
    let theta = ModelParams::random(ranks, &mut rng).unwrap();
    let n = rng.random_range(1..=25);
    let data = if seed % 2 == 1 {
        let s = po2pls::sample(&theta, n, rng.random()).unwrap();
        DataPair::new(s.x, s.y).unwrap()
    } else {
        let shift: f64 = rng.random_range(-1.0..1.0);
        let x = gauss(&mut rng, n, ranks.p).add_scalar(shift);
        let y = gauss(&mut rng, n, ranks.q).add_scalar(-shift);
        DataPair::new(x, y).unwrap()
    };
    (theta, data)
}

pub fn ortho_defect(a: &DMatrix<f64>) -> f64 {
    (a.tr_mul(a) - DMatrix::identity(a.ncols(), a.ncols())).amax()
}

/// Applies a joint-component permutation and per-component sign flips; the
/// sign of `t_k` flips with `w_k` and the sign of `u_k` with `c_k`.
pub fn relabel(theta: &ModelParams, perm: &[usize], flip_w: &[bool], flip_c: &[bool]) -> ModelParams {
    let mut out = theta.clone();
    for (new, &old) in perm.iter().enumerate() {
        let sw = if flip_w[new] { -1.0 } else { 1.0 };
        let sc = if flip_c[new] { -1.0 } else { 1.0 };
        out.w.set_column(new, &(theta.w.column(old) * sw));
        out.c.set_column(new, &(theta.c.column(old) * sc));
        out.b[new] = theta.b[old] * sw * sc;
        out.sigma_t2[new] = theta.sigma_t2[old];
        out.sigma_h2[new] = theta.sigma_h2[old];
    }
    out
}
