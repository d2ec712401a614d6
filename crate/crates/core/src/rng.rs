//! Seeded random streams.
//!
//! Every stream is a PCG32 generator (XSH-RR output, 64-bit LCG state). A
//! stream is identified by a 64-bit seed and a purpose string:
//!
//! * the initial state is `splitmix64(seed)`;
//! * the stream selector is `fnv1a64(purpose)`, turned into the odd LCG
//!   increment `(selector << 1) | 1`.
//!
//! Initialization follows the reference `pcg32_srandom_r`, so a stream can be
//! reproduced bit-for-bit in any language from the seed and purpose alone.

use rand_core::Rng;
use rand_pcg::Pcg32;

/// Stream used for test/train partitioning.
pub const SPLIT: &str = "split";
/// Stream used for trial schedules and epoch shuffles.
pub const SCHEDULE: &str = "schedule";
/// Stream used for additive noise and random mixing matrices.
pub const NOISE: &str = "noise";
/// Stream used for parameter initialization.
pub const INIT: &str = "init";

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct Stream {
    pcg: Pcg32,
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, purpose: &str) -> Self {
        Self::from_raw(splitmix64(seed), fnv1a64(purpose.as_bytes()))
    }

    /// Raw PCG32 construction, equivalent to `pcg32_srandom(state, selector)`.
    pub fn from_raw(state: u64, selector: u64) -> Self {
        Stream {
            pcg: Pcg32::new(state, selector),
            spare_normal: None,
        }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.pcg.next_u32()
    }

    /// Uniform in [0, 1) with 53 bits of resolution, built from two outputs
    /// (high word first).
    pub fn next_f64(&mut self) -> f64 {
        let hi = u64::from(self.next_u32()) >> 5; // 27 bits
        let lo = u64::from(self.next_u32()) >> 6; // 26 bits
        ((hi << 26) | lo) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`; `bound` must be nonzero and fit in 32
    /// bits. Lemire's multiply-and-reject method, so the result is unbiased.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(
            bound > 0 && bound <= u32::MAX as usize,
            "bound out of range"
        );
        let bound = bound as u32;
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = u64::from(self.next_u32()) * u64::from(bound);
            if (m as u32) >= threshold {
                return (m >> 32) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller. Draws come in pairs; the sine branch is
    /// cached and returned by the following call.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle (Durstenfeld, walking down from the end).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// A uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
