//! Run directories named `<hash>-seed<seed>`, where `hash` is the first 12
//! hex digits of the SHA-256 of the canonical configuration.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliResult;

pub fn config_hash(canonical: &str) -> String {
    hex::encode(Sha256::digest(canonical.as_bytes()))[..12].to_string()
}

/// Creates the run directory and stores `canonical` as `config.json` in it.
pub fn create(out: &Path, canonical: &str, seed: u64) -> CliResult<PathBuf> {
    let dir = out.join(format!("{}-seed{seed}", config_hash(canonical)));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.json"), canonical)?;
    Ok(dir)
}

/// Pretty JSON with a trailing newline, the canonical text for hashing.
pub fn canonical<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}
