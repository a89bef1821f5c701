//! Counter-based randomness.
//!
//! Every random decision in the toolkit is a pure function of
//! `(seed, stream, counter)`, so results do not depend on iteration order or
//! on how work is split across threads.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a string, used to key streams by tensor name.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a child seed from a parent seed and a path of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed ^ GOLDEN), |acc, &p| {
        mix64(acc.wrapping_add(GOLDEN).wrapping_add(mix64(p)))
    })
}

/// 64 random bits for position `counter` of `stream` under `seed`.
#[inline]
pub fn counter_u64(seed: u64, stream: u64, counter: u64) -> u64 {
    let key = mix64(seed ^ mix64(stream.wrapping_add(GOLDEN)));
    mix64(
        key ^ counter
            .wrapping_mul(GOLDEN)
            .wrapping_add(0xD1B5_4A32_D192_ED03),
    )
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
#[inline]
pub fn counter_unit(seed: u64, stream: u64, counter: u64) -> f64 {
    (counter_u64(seed, stream, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
