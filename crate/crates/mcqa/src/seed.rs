//! Sub-seed derivation.
//!
//! A single run seed governs every randomized procedure (downsampling,
//! exemplar selection, shuffles, corruptions). Each procedure derives its
//! own sub-seed by hashing `(seed, purpose, key)` so that, for example,
//! adding a question to a dataset does not perturb the corruption applied
//! to any other question.

use sha2::{Digest, Sha256};

/// Derives a deterministic sub-seed from a run seed, a purpose tag and a key
/// (usually a question id). Stable across platforms and releases.
pub fn derive_seed(seed: u64, purpose: &str, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(purpose.as_bytes());
    hasher.update([0x1f]);
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
