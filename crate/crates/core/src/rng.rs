//! Seeded, counter-based randomness.
//!
//! [`RngState`] wraps ChaCha8 and tracks how many 64-bit draws it has handed
//! out, so `(seed, position)` pins the rest of the stream exactly. Every
//! consumer in the crate takes randomness through the [`Chance`] trait, which
//! lets the losslessness oracle substitute an enumerating implementation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sampling::sample_categorical_with;

/// Source of the two random primitives speculative decoding needs.
pub trait Chance {
    /// Index drawn from `dist` (normalized, non-negative).
    fn categorical(&mut self, dist: &[f64]) -> Result<usize>;
    /// `true` with probability `p`.
    fn bernoulli(&mut self, p: f64) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub position: u64,
}

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    position: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            position: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Rebuilds the generator at an arbitrary stream position.
    pub fn at(seed: u64, position: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_word_pos(u128::from(position) * 2);
        Self {
            seed,
            position,
            inner,
        }
    }

    pub fn restore(snapshot: RngSnapshot) -> Self {
        Self::at(snapshot.seed, snapshot.position)
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            position: self.position,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit draws consumed so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Independent child stream. Derivation: `splitmix64(seed ^ splitmix64(stream))`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(derive_seed(seed, stream))
    }

    pub fn draw(&mut self) -> u64 {
        self.position += 1;
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision; one draw.
    pub fn uniform(&mut self) -> f64 {
        (self.draw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Stream derivation used throughout the CLI and data generators.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Each call is one 64-bit draw, even `next_u32`, so positions stay countable.
impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        (self.draw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.draw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.draw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

impl Chance for RngState {
    fn categorical(&mut self, dist: &[f64]) -> Result<usize> {
        sample_categorical_with(dist, self.uniform())
    }

    fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
