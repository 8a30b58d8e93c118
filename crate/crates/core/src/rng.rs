//! Deterministic randomness.
//!
//! Every stochastic element of a run draws from a [`ChaCha8Rng`] whose seed is
//! derived from the run seed plus a label or index path, so independent
//! subsystems (mobility, channel gains, baseline samplers) never perturb each
//! other's streams and any single stream can be reproduced in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step: mixes the state and returns the next output word.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of integers into a base seed. Order matters; each part is
/// mixed through splitmix64 so nearby paths give unrelated seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = base;
    let mut out = splitmix64(&mut state);
    for &p in parts {
        state ^= p;
        out = splitmix64(&mut state);
    }
    out
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a over the label bytes.
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seed for a named substream of the run.
pub fn stream_seed(base: u64, label: &str) -> u64 {
    derive_seed(base, &[label_hash(label)])
}

/// Generator for a named substream of the run.
pub fn stream(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(base, label))
}

/// Generator for an indexed substream (e.g. per cycle, per link).
pub fn indexed_stream(base: u64, label: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(stream_seed(base, label), parts))
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Exp(1) draw, floored away from zero so downstream power ratios stay finite.
pub fn unit_exponential(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u: f64 = rng.random();
    (-(1.0 - u).ln()).max(1e-12)
}
