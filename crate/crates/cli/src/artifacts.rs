//! Atomic file output, test-set fingerprints and the run manifest.

use std::path::{Path, PathBuf};

use ringfed::synth::{encode_volume, LabeledVolume};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of a test set; runs are only comparable when these agree.
pub fn test_set_hash(test: &[LabeledVolume]) -> String {
    let mut h = Sha256::new();
    for v in test {
        h.update(encode_volume(v));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary sibling and a rename, creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    ringfed::checkpoint::write_atomic(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Serializes rows with the csv crate; `header` names the columns.
pub fn csv_bytes<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.as_ref())?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub test_set_sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub scenario: String,
    pub config_sha256: String,
    pub seeds: Vec<SeedEntry>,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, scenario: &str, config_text: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            scenario: scenario.into(),
            config_sha256: hex_sha256(config_text.as_bytes()),
            seeds: Vec::new(),
            files: Vec::new(),
        }
    }
}

/// Collects written files relative to the output root so the manifest can list them.
pub struct OutDir {
    pub root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root, written: Vec::new() }
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        self.written.push(rel.to_string());
        Ok(path)
    }

    pub fn finish(mut self, mut manifest: Manifest) -> Result<PathBuf, CliError> {
        self.written.sort();
        manifest.files = self.written.clone();
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        self.write("manifest.json", &json)?;
        Ok(self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_creates_parents_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/c.txt");
        write_atomic(&p, b"hi").unwrap();
        write_atomic(&p, b"there").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"there");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn csv_quotes_when_needed() {
        let rows = vec![vec!["a,b".to_string(), "1".to_string()]];
        let b = csv_bytes(&["x", "y"], &rows).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "x,y\n\"a,b\",1\n");
    }
}
