//! Counter-based randomness: a value is a pure function of its key and
//! index, so replays never depend on call order.

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a path string.
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Key for a randomness stream identified by `(seed, step, path)`.
pub fn stream_key(seed: u64, step: u64, path: &str) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(step)) ^ hash_str(path))
}

/// Uniform draw in `[0, 1)` for element `index` of the stream `key`.
pub fn uniform(key: u64, index: u64) -> f64 {
    (splitmix64(key ^ splitmix64(index)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
