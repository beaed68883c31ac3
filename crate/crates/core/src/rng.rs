//! Seeding helpers. Every stochastic component draws from a ChaCha stream
//! derived from an explicit seed, so runs are reproducible on one platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Real;
use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal<S: Real>(rng: &mut Rng) -> S {
    let v: f64 = StandardNormal.sample(rng);
    S::lit(v)
}

pub fn normal_tensor<S: Real>(rng: &mut Rng, shape: &[usize]) -> Tensor<S> {
    Tensor::from_fn(shape, |_| normal(rng))
}
