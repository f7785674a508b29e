use serde::Serialize;
use sha2::{Digest, Sha256};

/// Stable digest of a configuration: SHA-256 of its JSON encoding (struct
/// fields in declaration order), truncated to 16 hex characters.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configs always serialize");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}
