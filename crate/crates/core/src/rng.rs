//! Seed derivation and Gaussian draws.
//!
//! All randomness flows from a `u64` seed through ChaCha12 so runs are
//! bit-reproducible across platforms. Per-item seeds are derived as
//! `seed ^ index`, making batched work independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::latent::LatentSequence;

/// Stream-independent seed for item `index` under a run seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ index
}

pub fn rng_from_seed(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn fill_standard_normal(rng: &mut ChaCha12Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

pub fn standard_normal_latent(rng: &mut ChaCha12Rng, frames: usize, dim: usize) -> LatentSequence {
    let mut z = LatentSequence::zeros(frames, dim);
    fill_standard_normal(rng, z.as_mut_slice());
    z
}

pub fn standard_normal_scalar(rng: &mut ChaCha12Rng) -> f64 {
    StandardNormal.sample(rng)
}
