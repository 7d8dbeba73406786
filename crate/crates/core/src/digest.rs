use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the compact JSON serialization of `value`.
///
/// Struct fields serialize in declaration order and maps are `BTreeMap`s in
/// every hashed type, so the digest only depends on the logical content.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("hashed values are always serializable");
    sha256_hex(&bytes)
}

/// First 64 bits of the SHA-256 of `bytes`, big endian.
pub fn seed_u64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}
