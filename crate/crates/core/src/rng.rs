//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator whose 64-bit seed is derived from a
//! global seed plus a key (a parameter name, a batch index, ...). ChaCha is
//! counter based, so streams are independent of the order they are created in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn named_stream(seed: u64, name: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(fnv1a(name.as_bytes()))))
}

pub fn indexed_stream(seed: u64, domain: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed ^ fnv1a(domain.as_bytes())) ^ index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_depend_on_all_key_parts() {
        let a: u64 = named_stream(1, "w").gen();
        assert_eq!(a, named_stream(1, "w").gen::<u64>());
        assert_ne!(a, named_stream(2, "w").gen::<u64>());
        assert_ne!(a, named_stream(1, "v").gen::<u64>());
        let b: u64 = indexed_stream(1, "batch", 0).gen();
        assert_ne!(b, indexed_stream(1, "batch", 1).gen::<u64>());
    }
}
