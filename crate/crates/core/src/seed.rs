//! Deterministic derivation of child seeds, so every sample's randomness is
//! independent of iteration order.

/// Child seed `index` of `parent` (splitmix64 finaliser over the pair).
pub fn derive(parent: u64, index: u64) -> u64 {
    let mut z = parent ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
