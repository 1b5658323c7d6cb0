//! Per-invocation audit record.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_RECORD_FILE: &str = "run_record.json";

/// Content hash in the style of a git blob id, over SHA-256:
/// `sha256("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub hash: String,
}

/// Inputs read by a command, hashed as they are registered.
#[derive(Debug, Clone, Default)]
pub struct InputLog {
    entries: Vec<InputDigest>,
}

impl InputLog {
    pub fn add_bytes(&mut self, path: &Path, bytes: &[u8]) {
        self.entries.push(InputDigest {
            path: path.to_path_buf(),
            hash: blob_hash(bytes),
        });
    }

    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.add_bytes(path, &bytes);
        Ok(())
    }

    pub fn entries(&self) -> &[InputDigest] {
        &self.entries
    }

    /// Hash over the sorted `(hash, path)` listing of all inputs.
    pub fn combined(&self) -> String {
        let mut lines: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("{} {}\n", e.hash, e.path.display()))
            .collect();
        lines.sort();
        lines.dedup();
        blob_hash(lines.concat().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub config: serde_json::Value,
    pub input_hash: String,
    pub inputs: Vec<InputDigest>,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
    pub outputs: Vec<PathBuf>,
    pub exit_status: i32,
    pub error: Option<RunError>,
}

impl RunRecord {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_RECORD_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_manual_prefix() {
        let mut h = Sha256::new();
        h.update(b"blob 5\0hello");
        assert_eq!(blob_hash(b"hello"), hex::encode(h.finalize()));
        assert_ne!(blob_hash(b"hello"), blob_hash(b"hellp"));
    }

    #[test]
    fn combined_hash_ignores_registration_order() {
        let mut a = InputLog::default();
        a.add_bytes(Path::new("x"), b"1");
        a.add_bytes(Path::new("y"), b"2");
        let mut b = InputLog::default();
        b.add_bytes(Path::new("y"), b"2");
        b.add_bytes(Path::new("x"), b"1");
        assert_eq!(a.combined(), b.combined());
        b.add_bytes(Path::new("z"), b"3");
        assert_ne!(a.combined(), b.combined());
    }
}
