mod common;

use common::dense_sigma;
use po2pls::{implied_covariance, sample, ModelParams, RankSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sample_covariance_matches_implied() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let theta = ModelParams::random(RankSpec::new(6, 4, 2, 1, 1).unwrap(), &mut rng).unwrap();
    let implied = implied_covariance(&theta).unwrap().dense();
    assert!((&implied - dense_sigma(&theta)).norm() < 1e-12);

    let n = 1_000_000;
    let s = sample(&theta, n, 7).unwrap();
    let d = implied.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..=i {
            let col = |k: usize| if k < 6 { s.x.column(k) } else { s.y.column(k - 6) };
            let emp = col(i).dot(&col(j)) / n as f64;
            let se = ((implied[(i, i)] * implied[(j, j)] + implied[(i, j)].powi(2)) / n as f64).sqrt();
            worst = worst.max((emp - implied[(i, j)]).abs() / se);
        }
    }
    assert!(worst < 3.0, "largest deviation {worst:.2} Monte Carlo errors");
}

#[test]
fn sampling_is_bit_identical_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = ModelParams::random(RankSpec::new(8, 5, 2, 1, 2).unwrap(), &mut rng).unwrap();
    let a = sample(&theta, 40, 3).unwrap();
    let b = sample(&theta, 40, 3).unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.y, b.y);
    assert_ne!(sample(&theta, 40, 4).unwrap().x, a.x);
}
