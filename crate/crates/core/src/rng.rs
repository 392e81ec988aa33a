//! The single pseudo-random generator used throughout the crate.
//!
//! Every random draw (graph generation, initial iterates, minibatch
//! sampling, probe sampling) comes from [`ChaCha8Rng`] seeded with
//! `seed_from_u64`. Independent sub-streams are selected with
//! [`ChaCha8Rng::set_stream`], so a draw sequence is fully identified by
//! `(seed, stream)`. Alternate implementations that want to reproduce our
//! streams need ChaCha with 8 rounds and the `rand_core` `seed_from_u64`
//! expansion (PCG32-based) as of `rand_chacha` 0.9.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Stream ids for the different consumers of randomness.
pub mod stream {
    pub const GRAPH: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const SYNTHETIC_DATA: u64 = 5;
    pub const PARTITION: u64 = 6;
    pub const PROBE_POINTS: u64 = 7;
    /// Minibatch streams are `MINIBATCH_BASE + agent index`.
    pub const MINIBATCH_BASE: u64 = 1 << 32;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
