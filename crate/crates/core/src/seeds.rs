//! Purpose-tagged seed derivation.
//!
//! Every random stream in the laboratory is seeded from `(master, purpose,
//! index)` through SHA-256, so adding a new consumer or a new sweep point
//! never shifts the seeds handed to existing ones.

use sha2::{Digest, Sha256};

pub fn derive(master: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
