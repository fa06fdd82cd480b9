//! Report files and run directories.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Parse(format!("report serialization: {e}")))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_toml(value)?)?;
    Ok(())
}

/// First 12 hex digits of the SHA-256 of `text`.
pub fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Creates `parent/<label>-<hash>` and returns it.
pub fn run_dir(parent: &Path, label: &str, hashed: &str) -> Result<PathBuf> {
    let dir = parent.join(format!("{label}-{}", short_hash(hashed)));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable() {
        assert_eq!(short_hash(""), "e3b0c44298fc");
        assert_eq!(short_hash("abc").len(), 12);
    }
}
