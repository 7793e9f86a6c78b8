//! Labeled random streams derived from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Maps `(master seed, label)` to independent stream seeds.
///
/// Labels are plain strings such as `"topology/W/rep-0"`. The mapping is the
/// first eight bytes (little-endian) of `SHA-256(master_le || label)`, so it
/// is stable across platforms and releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedScheme {
    master: u64,
}

impl SeedScheme {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn derive(&self, label: &str) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.master.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    pub fn rng(&self, label: &str) -> ChaCha8Rng {
        rng(self.derive(label))
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One generator per index, all keyed by the same seed but on distinct
/// ChaCha streams, so draws for index `i` never depend on any other index.
pub fn stream_family(seed: u64, count: usize) -> Vec<ChaCha8Rng> {
    (0..count)
        .map(|i| {
            let mut r = rng(seed);
            r.set_stream(i as u64);
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_is_stable_and_label_sensitive() {
        let s = SeedScheme::new(42);
        assert_eq!(s.derive("a"), s.derive("a"));
        assert_ne!(s.derive("a"), s.derive("b"));
        assert_ne!(s.derive("a"), SeedScheme::new(43).derive("a"));
    }

    #[test]
    fn derive_matches_sha256_prefix() {
        let digest = Sha256::digest([7u64.to_le_bytes().as_slice(), b"x"].concat());
        let expected = u64::from_le_bytes(digest[..8].try_into().unwrap());
        assert_eq!(SeedScheme::new(7).derive("x"), expected);
    }

    #[test]
    fn streams_are_independent_of_family_size() {
        let mut small = stream_family(5, 2);
        let mut large = stream_family(5, 10);
        assert_eq!(small[1].next_u64(), large[1].next_u64());
        assert_ne!(large[0].next_u64(), large[2].next_u64());
    }
}
