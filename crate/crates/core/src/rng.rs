//! Seeded randomness.
//!
//! Every stochastic decision in the engine draws from a [`UniformSource`].
//! The production source is a ChaCha stream cipher seeded per
//! `(run seed, request, round)` so that a request's token trajectory does
//! not depend on batch composition, execution mode, or transport — the
//! property the determinism and transport-transparency checks rely on.
//! [`ScriptedSource`] feeds a predetermined list of draws, which is how
//! the enumeration oracle steers the verifier through every branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A stream of uniform draws in `[0, 1)`.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

/// Deterministic, platform-independent uniform source.
pub struct SeededSource {
    rng: ChaCha8Rng,
}

impl SeededSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream for a tagged subtask.
    pub fn derive(base: u64, tags: &[u64]) -> Self {
        Self::new(derive_seed(base, tags))
    }
}

impl UniformSource for SeededSource {
    fn next_uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}

/// Mixes a base seed with tags (splitmix64 finalizer per step).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base;
    for &t in tags {
        state = splitmix64(state ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Replays a fixed list of draws. Panics when exhausted: a scripted run
/// that consumes more draws than scripted is a driver bug.
pub struct ScriptedSource {
    draws: Vec<f64>,
    next: usize,
}

impl ScriptedSource {
    pub fn new(draws: Vec<f64>) -> Self {
        Self { draws, next: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.next
    }

    pub fn remaining(&self) -> usize {
        self.draws.len() - self.next
    }
}

impl UniformSource for ScriptedSource {
    fn next_uniform(&mut self) -> f64 {
        let d = *self
            .draws
            .get(self.next)
            .expect("scripted uniform source exhausted");
        self.next += 1;
        d
    }
}
