//! Content hashes embedded in every artifact.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Crate version stamped into artifacts.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// First 16 hex digits of SHA-256 over the JSON encoding of `value`.
pub fn hash_of<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize infallibly");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// 64-bit FNV-1a, used to derive stable sub-seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent stream seed from a base seed and a label.
pub fn sub_seed(seed: u64, label: &[u8]) -> u64 {
    let mut z = seed ^ fnv1a(label);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_distinct() {
        assert_eq!(hash_of(&[1, 2, 3]), hash_of(&[1, 2, 3]));
        assert_ne!(hash_of(&[1, 2, 3]), hash_of(&[1, 2, 4]));
        assert_eq!(hash_of(&0u8).len(), 16);
        assert_ne!(sub_seed(1, b"a"), sub_seed(1, b"b"));
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
    }
}
