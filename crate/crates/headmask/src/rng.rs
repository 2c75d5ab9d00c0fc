//! Seeded RNG streams.
//!
//! All randomness in a run flows from a single u64 seed. Each concern
//! (weight init, dropout, data shuffling, head-mask sampling) draws from
//! its own named stream so that, e.g., changing the masking strategy never
//! perturbs the dropout draws or the batch order.
//!
//! Streams that need a fresh generator per step (dropout, mask sampling)
//! derive it from (seed, stream, step); this is what lets the two forward
//! passes of importance-masked training replay identical dropout masks.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams. The numeric value is mixed into the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialisation.
    Init = 1,
    /// Dropout masks.
    Dropout = 2,
    /// Corpus generation and batch shuffling.
    Data = 3,
    /// Head-mask sampling.
    Mask = 4,
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for a (seed, stream) pair.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(stream as u64)))
}

/// Generator for a (seed, stream, counter) triple. Used where every step
/// (or epoch) needs an independent, reproducible generator.
pub fn counter_rng(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(stream as u64) ^ mix(counter.wrapping_add(0x5bd1))))
}
