//! Deterministic random-number plumbing.
//!
//! All randomness in a run flows from one 64-bit master seed, fanned out into
//! *named substreams* (`env`, `exploration`, `sampling`, `alternatives`, ...).
//! Each substream is an independent ChaCha8 generator seeded from a stable
//! hash of `(master_seed, name)`, so adding or removing draws in one component
//! never perturbs the sequence seen by another. That property is what makes
//! "method A with feature X disabled behaves bit-identically to method B"
//! tests possible.
//!
//! Helper samplers are deliberately hand-rolled on top of the raw `u64`
//! stream (53-bit uniforms, Box–Muller normals, widening-multiply index
//! selection) so their byte-level behaviour is pinned by this crate rather
//! than by a third-party distribution library.

pub use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// FNV-1a hash of a byte string; stable, dependency-free.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; decorrelates structured seed inputs.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed for a named substream of `master_seed`.
pub fn substream_seed(master_seed: u64, name: &str) -> u64 {
    splitmix64(master_seed ^ splitmix64(fnv1a64(name.as_bytes())))
}

/// A ChaCha8 generator for the named substream of `master_seed`.
pub fn substream(master_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master_seed, name))
}

/// Uniform draw in `[0, 1)` with 53 bits of mantissa.
pub fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

/// Standard normal draw via Box–Muller (consumes exactly two uniforms).
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Guard the log: map u1 = 0 to the smallest positive draw instead.
    let u1 = uniform01(rng).max(f64::MIN_POSITIVE);
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform index in `[0, n)` via widening multiply (no modulo bias at the
/// magnitudes used here; `n` is at most a few hundred thousand).
pub fn index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    (((rng.next_u64() as u128) * (n as u128)) >> 64) as usize
}
