//! Stage-seed derivation.
//!
//! The master seed fans out through a labeled hash so each stage (and each
//! task or query within a stage) gets an independent, reproducible stream
//! with no cross-stage coupling.

use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{master}:{label}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
