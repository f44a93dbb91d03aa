//! Portable, seed-addressed random streams.
//!
//! Every random decision in the crate draws from a [`Stream`]: ChaCha8 keyed
//! with the 64-bit seed (little-endian in key bytes 0..8, remaining key bytes
//! zero) and the ChaCha stream id set to a [`Purpose`]. All derived draws are
//! built from `next_u64` only, so another implementation can reproduce them:
//!
//! - `uniform()`   = `(next_u64() >> 11) * 2^-53`, in `[0, 1)`
//! - `below(n)`    = `floor(uniform() * n)`
//! - `normal()`    = Box-Muller cosine branch, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`
//!   with `u1`, `u2` two consecutive `uniform()` draws
//! - `uniform_in(a, b)` = `a + (b - a) * uniform()`

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Stream ids. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Split = 1,
    Generator = 2,
    Init = 3,
    Shuffle = 4,
    Pretrain = 5,
    Subsample = 6,
}

#[derive(Debug, Clone)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self::with_stream_id(seed, purpose as u64)
    }

    /// A stream with an explicit id; sub-streams of a purpose use
    /// `(purpose << 32) | index`.
    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Stream { inner }
    }

    pub fn sub(seed: u64, purpose: Purpose, index: u32) -> Self {
        Self::with_stream_id(seed, ((purpose as u64) << 32) | index as u64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle drawing `below(i + 1)` for `i` from the top down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
