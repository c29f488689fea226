//! Deterministic, hierarchical seed streams.
//!
//! A stream is named by a tuple such as `(global_seed, "slice", shard, slice)`.
//! The tuple is serialized into a byte string, hashed with 64-bit FNV-1a, and
//! the hash seeds a SplitMix64 generator. Nothing about a stream has to be
//! persisted: re-deriving the same tuple always yields the same sequence, which
//! is what lets a checkpoint restore continue training without saved RNG state.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

const TAG_U64: u8 = 0x01;
const TAG_STR: u8 = 0x02;

/// 64-bit FNV-1a over a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Name of a seed stream: an append-only serialized tuple.
///
/// Each element is encoded as a one-byte type tag followed by its payload
/// (`u64` little-endian, or a little-endian `u64` length followed by UTF-8
/// bytes for strings), so `("ab", "c")` and `("a", "bc")` never collide.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SeedKey {
    bytes: Vec<u8>,
}

impl SeedKey {
    pub fn new(global_seed: u64) -> Self {
        SeedKey { bytes: Vec::with_capacity(64) }.with(global_seed)
    }

    /// Append an integer component.
    pub fn with(mut self, value: u64) -> Self {
        self.bytes.push(TAG_U64);
        self.bytes.extend_from_slice(&value.to_le_bytes());
        self
    }

    /// Append a string component.
    pub fn tag(mut self, name: &str) -> Self {
        self.bytes.push(TAG_STR);
        self.bytes.extend_from_slice(&(name.len() as u64).to_le_bytes());
        self.bytes.extend_from_slice(name.as_bytes());
        self
    }

    pub fn child(&self, value: u64) -> Self {
        self.clone().with(value)
    }

    pub fn child_tag(&self, name: &str) -> Self {
        self.clone().tag(name)
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(&self.bytes)
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::from_state(self.digest())
    }
}

/// SplitMix64 generator with the few sampling helpers the crate needs.
///
/// Sampling is written out here rather than taken from `rand` so that the
/// exact mapping from raw 64-bit outputs to floats, bounded integers and
/// permutations is fixed and independent of pointer width.
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: SplitMix64,
}

impl StreamRng {
    pub fn from_state(state: u64) -> Self {
        StreamRng { inner: SplitMix64::seed_from_u64(state) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`, rounded to `f32`.
    pub fn uniform_f32(&mut self, lo: f64, hi: f64) -> f32 {
        (lo + (hi - lo) * self.next_f64()) as f32
    }

    /// Uniform integer in `[0, bound)` by rejection (no modulo bias).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Fisher-Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// A permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
