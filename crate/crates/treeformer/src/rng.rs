//! Seeded RNG helpers. Everything that draws randomness goes through a
//! ChaCha8 stream so runs are reproducible from a single seed.

use crate::tensor::{s, Scalar};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a named purpose from a base seed.
pub fn substream(seed: u64, stream: u64) -> Prng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derived seed for code that wants a fresh base seed rather than a stream.
pub fn substream_seed(seed: u64, stream: u64) -> u64 {
    substream(seed, stream).gen()
}

pub fn uniform<F: Scalar>(rng: &mut Prng, lo: f64, hi: f64) -> F {
    s::<F>(rng.gen_range(lo..hi))
}

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weight initialization.
pub fn init_weight<F: Scalar>(rng: &mut Prng, fan_in: usize, n: usize) -> Vec<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| uniform(rng, -bound, bound)).collect()
}
