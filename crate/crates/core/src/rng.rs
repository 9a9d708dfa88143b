//! Seed derivation and sampling helpers.
//!
//! One top-level seed fans out into independent ChaCha streams, one per
//! concern (init, batches, clustering, ...), so stages and sub-steps can be
//! re-run independently without disturbing each other's randomness.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; used to mix seed material into subseeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, label, index)`. Stable across platforms.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = mix(seed);
    for &b in label.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ index)
}

/// ChaCha stream for a named sub-concern of `seed`.
pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, index))
}

/// Standard normal draw via Box-Muller. Two uniforms per call keeps the
/// stream consumption independent of any cached spare value.
pub fn normal_f64<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}
