//! Shared inputs for the benchmarks in `benches/`.

use po2pls::{gen_scenario, RankSpec, Result, Scenario, ScenarioConfig};

/// Single-replicate scenario with unit effects and moderate noise.
pub fn scenario(n: usize, p: usize, q: usize, r: usize, rx: usize, ry: usize) -> Result<Scenario> {
    let config = ScenarioConfig {
        n_train: n,
        n_test: 0,
        ranks: RankSpec::new(p, q, r, rx, ry)?,
        noise_x: 0.4,
        noise_y: 0.4,
        heterogeneity: 0.2,
        b_values: vec![1.0; r],
        replicates: 1,
        seed: 17,
    };
    gen_scenario(&config)
}
