//! Shared fixtures for the benchmark suite; see `benches/hotpaths.rs`.

use invrec::dataset::{make_synthetic, FeatureTable, InteractionSet, SyntheticSpec};
use invrec::envid::EnvPartition;

/// A medium synthetic instance, sized so one gradient pass takes long
/// enough to time but short enough to iterate.
pub fn bench_world(seed: u64) -> (InteractionSet, FeatureTable, EnvPartition) {
    let spec = SyntheticSpec {
        num_users: 100,
        num_items: 150,
        d_inv: 4,
        d_spu: 4,
        num_envs_true: 2,
        flip_strength: 1.0,
        density: 0.05,
        seed,
    };
    make_synthetic(&spec).expect("synthetic generation succeeds")
}
