//! Canonical JSON: object keys sorted, compact UTF-8, reals in shortest
//! round-trip decimal form. Used for the store manifest, best-path records
//! and experiment configs, so equal values always produce equal bytes.

use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn to_vec<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    // `serde_json::Value` keeps object keys in a BTreeMap, which sorts them.
    let v = serde_json::to_value(value)?;
    serde_json::to_vec(&v)
}

pub fn to_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

pub fn from_slice<T: DeserializeOwned>(bytes: &[u8]) -> serde_json::Result<T> {
    serde_json::from_slice(bytes)
}
