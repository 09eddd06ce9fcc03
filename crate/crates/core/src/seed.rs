//! Per-component seed derivation from a single root seed.

use sha2::{Digest, Sha256};

/// First eight bytes (little endian) of `sha256(root_le ‖ component)`.
pub fn derive_seed(root: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
