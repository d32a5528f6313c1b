use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix2D;

/// Seeded ChaCha8 stream.
///
/// ChaCha is a counter-based cipher, so independent sub-streams can be split
/// off by label without consuming from the parent.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `label`. Does not advance `self`.
    pub fn split(&self, label: &str) -> RngState {
        let stream = fnv1a(label.as_bytes()) ^ self.stream.rotate_left(17);
        Self::with_stream(self.seed, stream)
    }

    /// Independent stream keyed by `label` and an index (e.g. a sample id).
    pub fn split_indexed(&self, label: &str, index: u64) -> RngState {
        let stream = fnv1a(label.as_bytes())
            .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            ^ self.stream.rotate_left(17);
        Self::with_stream(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix2D {
        let data = (0..rows * cols).map(|_| self.uniform(lo, hi)).collect();
        Matrix2D::from_vec(rows, cols, data).expect("length matches")
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, sd: f64) -> Matrix2D {
        let data = (0..rows * cols).map(|_| sd * self.normal()).collect();
        Matrix2D::from_vec(rows, cols, data).expect("length matches")
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
