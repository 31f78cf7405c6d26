use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest of a value's canonical JSON encoding (struct field order is fixed).
pub fn json_digest<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_vec(value).expect("serializable value"))
}

/// Digest of a selected feature list; ties checkpoints to the column layout
/// they were trained on.
pub fn feature_digest(names: &[String]) -> String {
    sha256_hex(names.join("\n"))
}
