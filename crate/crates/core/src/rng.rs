//! Seeded RNG streams, split by name.
//!
//! Reproducibility contract: every random draw in the crate comes from a
//! stream derived as `derive(base_seed, name)`, where `name` identifies the
//! concern ("init", "data-order", "sim:<task>", "probe:contact", ...).
//! Distinct names yield independent streams, so adding draws to one concern
//! never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic child RNG for `(seed, name)`.
pub fn derive_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Deterministic child seed for `(seed, name)`, for nesting streams.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0x2e]);
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
