//! Stable seed derivation. Everything random in the crate flows from a root
//! seed through these mixers so that serial and parallel runs agree bit for bit.

use crate::Token;

/// splitmix64 finalizer.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream index.
pub(crate) fn derive(parent: u64, stream: u64) -> u64 {
    mix(parent ^ mix(stream))
}

/// FNV-1a over token ids, with a length separator so `[1],[2]` and `[1,2]` differ.
pub(crate) fn hash_tokens(seed: u64, parts: &[&[Token]]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01B3;
    let mut h = 0xCBF2_9CE4_8422_2325 ^ mix(seed);
    for part in parts {
        for &t in part.iter() {
            for b in t.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        }
        h ^= 0xFF;
        h = h.wrapping_mul(PRIME);
        h ^= part.len() as u64;
        h = h.wrapping_mul(PRIME);
    }
    mix(h)
}
