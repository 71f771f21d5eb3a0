//! Seedable, position-addressable random streams.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A ChaCha8 stream whose exact position can be saved and restored.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// Serializable snapshot of a [`SeedStream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamPosition {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl SeedStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn position(&self) -> StreamPosition {
        StreamPosition { seed: self.seed, stream: self.stream, word_pos: self.rng.get_word_pos() }
    }

    pub fn restore(pos: StreamPosition) -> Self {
        let mut s = Self::new(pos.seed, pos.stream);
        s.rng.set_word_pos(pos.word_pos);
        s
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
