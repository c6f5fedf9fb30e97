//! Seedable, splittable random streams.
//!
//! A stream is addressed by a path of integer keys. Children are derived
//! from the key path alone, never from the parent's consumption state, so
//! the draws seen by `(trial 7, noise)` do not depend on what other trials
//! or purposes consumed first.

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a child stream is used for. Kept as a fixed discriminant so that
/// adding a new purpose never shifts existing streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Pilots = 1,
    Activity = 2,
    Channels = 3,
    Noise = 4,
    Other = 15,
}

#[derive(Debug, Clone)]
pub struct RandomStream {
    key: [u64; 4],
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self::from_key([seed, 0, 0, 0])
    }

    fn from_key(key: [u64; 4]) -> Self {
        let mut bytes = [0u8; 32];
        for (chunk, word) in bytes.chunks_exact_mut(8).zip(key.iter()) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self {
            key,
            rng: ChaCha8Rng::from_seed(bytes),
        }
    }

    /// Child stream for `(index, purpose)`. Repeated calls with the same
    /// arguments return streams that replay the same sequence.
    pub fn child(&self, index: u64, purpose: Purpose) -> Self {
        // Each derivation folds the previous key into a fresh ChaCha stream
        // so nested children stay distinct from siblings.
        let mut mixer = ChaCha8Rng::from_seed(self.seed_bytes());
        mixer.set_stream(index);
        mixer.set_word_pos(u128::from(purpose as u64) << 8);
        let key = [
            mixer.next_u64(),
            mixer.next_u64(),
            mixer.next_u64(),
            mixer.next_u64(),
        ];
        Self::from_key(key)
    }

    fn seed_bytes(&self) -> [u8; 32] {
        let mut bytes = [0u8; 32];
        for (chunk, word) in bytes.chunks_exact_mut(8).zip(self.key.iter()) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        bytes
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        if high <= low {
            return low;
        }
        self.rng.random_range(low..=high)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// One draw from CN(0, 1): independent real and imaginary parts of
    /// variance 1/2 each.
    pub fn complex_normal(&mut self) -> Complex64 {
        let re: f64 = self.rng.sample(StandardNormal);
        let im: f64 = self.rng.sample(StandardNormal);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }
}
