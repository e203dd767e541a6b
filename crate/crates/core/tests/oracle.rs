mod common;

use common::{oracle, rel_close, rel_close_scalar, small_instance};
use nalgebra::DMatrix;
use po2pls::{latent_moments, log_likelihood, predict_scores, predict_y_from_x, RankSpec};

const TOL: f64 = 1e-8;

#[test]
fn moments_match_dense_conditioning() {
    for seed in 0..50 {
        let (theta, data) = small_instance(seed);
        let o = oracle(&theta, &data);
        let m = latent_moments(&theta, &data).unwrap();
        let RankSpec { r, rx, ry, .. } = theta.ranks();
        let mean = DMatrix::from_columns(
            &[&m.mean_t, &m.mean_u, &m.mean_to, &m.mean_uo]
                .iter()
                .flat_map(|b| b.column_iter().map(|c| c.into_owned()))
                .collect::<Vec<_>>(),
        );
        assert_eq!(mean.ncols(), 2 * r + rx + ry);
        assert!(rel_close(&mean, &o.mean, TOL), "seed {seed}: means");
        assert!(rel_close(&m.posterior_cov, &o.posterior_cov, TOL), "seed {seed}: cov");
        assert!(rel_close(&m.second_moment, &o.second_moment, TOL), "seed {seed}: moments");
        assert!(rel_close(&m.s_hh, &o.s_hh, TOL), "seed {seed}: s_hh");
        assert!(rel_close_scalar(m.tr_ee, o.tr_ee, TOL), "seed {seed}: tr_ee");
        assert!(rel_close_scalar(m.tr_ff, o.tr_ff, TOL), "seed {seed}: tr_ff");
    }
}

#[test]
fn likelihood_and_prediction_match_dense_conditioning() {
    for seed in 0..50 {
        let (theta, data) = small_instance(seed);
        let o = oracle(&theta, &data);
        let ll = log_likelihood(&theta, &data).unwrap();
        assert!(rel_close_scalar(ll, o.loglik, TOL), "seed {seed}: {ll} vs {}", o.loglik);
        let y_hat = predict_y_from_x(&theta, &data.x).unwrap();
        assert!(rel_close(&y_hat, &o.y_hat, TOL), "seed {seed}: prediction");
        let scores = predict_scores(&theta, &data).unwrap();
        let r = theta.ranks().r;
        assert!(rel_close(&scores.t, &o.mean.columns(0, r).into_owned(), TOL));
    }
}
