use super::{Matrix, Scalar};
use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based splitmix64 stream.
///
/// Draw `i` is `mix64(seed + (i + 1)·γ)`, so any `(seed, counter)` pair
/// names the same value on every platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Independent child stream keyed by `key`.
    pub fn derive(seed: u64, key: u64) -> Self {
        Self::new(mix64(seed ^ mix64(key.wrapping_add(GOLDEN_GAMMA))))
    }

    /// Child stream of this stream's seed; does not advance `self`.
    pub fn fork(&self, key: u64) -> Self {
        Self::derive(self.seed, key)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be non-zero.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire multiply-shift.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch; two draws per sample).
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Matrix of i.i.d. `N(0, std²)` entries drawn from `stream`.
pub fn randn_matrix<T: Scalar>(
    stream: &mut RngStream,
    rows: usize,
    cols: usize,
    std: f64,
) -> Result<Matrix<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyMatrix);
    }
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!("std must be positive, got {std}")));
    }
    let data = (0..rows * cols).map(|_| T::from_wide(std * stream.next_normal())).collect();
    Ok(Matrix::from_parts(rows, cols, data))
}
