//! The JSON run report shared by every subcommand.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// Identifies what a run read.
#[derive(Debug, Clone, Serialize)]
pub struct Fingerprint {
    /// File path as given, or a built-in source name.
    pub source: String,
    /// Rows used after filtering (strata for population specs).
    pub rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows_read: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows_dropped: Option<usize>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub columns: Value,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub command: Vec<String>,
    pub input: Fingerprint,
    pub seed: u64,
    pub results: Value,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn new(
        command: Vec<String>,
        input: Fingerprint,
        seed: u64,
        results: Value,
        warnings: Vec<String>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            input,
            seed,
            results,
            warnings,
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
