//! SHA-256 helpers and seed derivation.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Derives a 64-bit seed from a base seed and a list of key parts, so random
/// draws depend on what they are for rather than on call order.
pub fn derive_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Shorthand for [`derive_seed`] keyed by a label and an index.
pub fn keyed_seed(seed: u64, label: &str, index: u64) -> u64 {
    derive_seed(seed, &[label.as_bytes(), &index.to_le_bytes()])
}
