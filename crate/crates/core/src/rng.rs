//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `seed` (expanded to a 256-bit
//! key with the PCG32 routine of `rand_core::SeedableRng::seed_from_u64`) and
//! positioned on ChaCha stream `stream`. Distinct `(seed, stream)` pairs give
//! independent sequences, so per-purpose and per-worker streams never share
//! state.
//!
//! Uniforms take the top 53 bits of a `u64` draw; normals use the polar-free
//! Box–Muller transform on two uniforms, returning both outputs in order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids used across the crate.
pub mod streams {
    pub const FIELD: u64 = 1;
    pub const QUERIES: u64 = 2;
    pub const INIT: u64 = 3;
    pub const EPSILON: u64 = 4;
    pub const PREDICT: u64 = 5;
    pub const LIKELIHOOD: u64 = 6;
}

pub struct StreamRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform_open_closed(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53
    }

    /// Index uniformly distributed on `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open_closed();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let phase = std::f64::consts::TAU * u2;
        self.spare = Some(r * phase.sin());
        r * phase.cos()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// `k` distinct indices from `0..n` by a partial Fisher–Yates shuffle.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
