//! Content hashes and the tool stamp embedded in every artifact.

use serde::Serialize;
use sha2::{Digest, Sha256};

use relbias_core::io::{sg_table, zs_table};
use relbias_core::Dataset;

pub const TOOL: &str = "relbias";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn tool_version() -> String {
    format!("{TOOL}-{VERSION}")
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        // Length-prefix each part so concatenation boundaries matter.
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Hash of the compact JSON encoding of `value`.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&[&bytes])
}

/// Hash of both logit tables of `ds` in their on-disk form.
pub fn dataset_hash(ds: &Dataset) -> String {
    sha256_hex(&[
        zs_table(ds).render().as_bytes(),
        sg_table(ds).render().as_bytes(),
    ])
}

/// First 16 hex digits, for file names and table headers.
pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(16)]
}
