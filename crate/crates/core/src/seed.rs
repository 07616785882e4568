//! Per-purpose seed derivation.
//!
//! Every random stream in a run is keyed by the master seed plus a purpose
//! label and a list of integer coordinates (node id, config index, step index).
//! The derived seed is the first eight bytes, little-endian, of
//! `SHA-256(purpose || 0x00 || master_le || coord_le...)`. Streams are
//! ChaCha8 generators seeded through `SeedableRng::seed_from_u64`, so a
//! stream never depends on how many draws another stream has consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used for every seeded stream in the crate.
pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(master: u64, purpose: &str, coords: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(purpose.as_bytes());
    hasher.update([0u8]);
    hasher.update(master.to_le_bytes());
    for c in coords {
        hasher.update(c.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, purpose: &str, coords: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, purpose, coords))
}

pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derivation_is_stable_and_purpose_sensitive() {
        let a = derive_seed(7, "noise", &[3, 1]);
        assert_eq!(a, derive_seed(7, "noise", &[3, 1]));
        assert_ne!(a, derive_seed(7, "noise", &[1, 3]));
        assert_ne!(a, derive_seed(7, "failure", &[3, 1]));
        assert_ne!(a, derive_seed(8, "noise", &[3, 1]));
    }

    #[test]
    fn streams_replay() {
        let mut x = stream(1, "p", &[]);
        let mut y = stream(1, "p", &[]);
        for _ in 0..8 {
            assert_eq!(x.next_u64(), y.next_u64());
        }
    }
}
