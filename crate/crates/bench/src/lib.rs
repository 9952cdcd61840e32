//! Fixtures shared by the benchmarks.

use protolab::{Activation, PolicyConfig, PolicyParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Freshly initialised agent with the standard architecture.
pub fn agent(seed: u64) -> PolicyParams<f32> {
    let config = PolicyConfig::standard(3, 5, Activation::Relu).expect("standard policy");
    PolicyParams::init(config, &mut rng(seed))
}
