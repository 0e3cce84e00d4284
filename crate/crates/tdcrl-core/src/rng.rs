//! Seed derivation for reproducible runs.
//!
//! A single master seed fans out into named substreams so that augmentation,
//! initialization, shuffling, and synthetic noise can be re-seeded
//! independently. The derivation is `SHA-256(master_le || label || index_le)`
//! truncated to a ChaCha8 seed, so any (label, index) pair names the same
//! stream on every platform.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Named, indexed substream of the master seed.
pub fn substream(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master, label, index))
}

/// The 32-byte seed backing [`substream`].
pub fn derive_seed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    seed
}

/// Collapses arbitrary bytes to a u64 stream index (first 8 digest bytes, LE).
pub fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// One standard-normal f64 draw.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}
