//! Seeded, portable random source.
//!
//! Every stochastic step in the pipeline draws from [`SeededRng`], whose
//! algorithm is fixed so results can be reproduced by an independent
//! implementation:
//!
//! - bits: ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64(seed)`), with
//!   `set_stream(stream)` selecting an independent substream;
//! - [`SeededRng::below`]: rejection sampling, `x % n` for the first
//!   `x = next_u64()` with `x < n * floor(2^64 / n)`;
//! - [`SeededRng::unit`]: `(next_u64() >> 11) * 2^-53`, uniform on `[0, 1)`;
//! - [`SeededRng::normal`]: Box–Muller cosine branch on two `unit()` draws,
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`;
//! - [`SeededRng::shuffle`]: Fisher–Yates from the back,
//!   `for i in (1..n).rev() { swap(i, below(i + 1)) }`;
//! - [`SeededRng::sample_indices`]: forward partial Fisher–Yates,
//!   `for i in 0..k { swap(i, i + below(n - i)) }`, returning the first `k`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = (u64::MAX / n) * n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.unit();
        let u2 = self.unit();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

/// Mixes a base seed with a tag into a new seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
