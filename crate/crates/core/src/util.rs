//! Small shared helpers.

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of a byte string; the hash used for config and
/// corpus identities in manifests and reports.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
