//! Shared fixtures for the benchmarks.

use contam_core::oracle::random_spec_with;
use contam_core::{simulate, Dataset, PopulationSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A fixed random design with `strata` strata and `k` treatment arms.
pub fn spec(strata: usize, k: usize) -> PopulationSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(strata as u64 * 31 + k as u64);
    random_spec_with(&mut rng, strata, k)
}

/// `n` draws from [`spec`], redrawn until every (stratum, arm) cell is populated.
pub fn sample(strata: usize, k: usize, n: usize) -> Dataset {
    let spec = spec(strata, k);
    (0..)
        .filter_map(|seed| simulate(&spec, n, seed).ok())
        .find(|ds| {
            let s = ds.strata();
            s.len() == strata
                && s.cell_counts(ds.treatment(), k + 1)
                    .iter()
                    .flatten()
                    .all(|&c| c > 0)
        })
        .expect("some seed fills every cell")
}
