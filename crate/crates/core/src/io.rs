//! Output files and their digests.
//!
//! Experiments render every output into memory first. The files are then
//! written in name order and digested, so the manifest always lists exactly
//! the bytes on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One entry of a manifest's file inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Named output files held in memory.
#[derive(Debug, Clone, Default)]
pub struct OutputSet {
    files: BTreeMap<String, Vec<u8>>,
}

impl OutputSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    /// Renders a CSV through `fill` and stores it under `name`.
    pub fn csv<F>(&mut self, name: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.insert(name, buf);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    pub fn digests(&self) -> Vec<FileDigest> {
        self.files
            .iter()
            .map(|(name, bytes)| FileDigest {
                name: name.clone(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len(),
            })
            .collect()
    }

    pub fn write_to(&self, dir: &Path) -> Result<Vec<FileDigest>> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| LabError::io(&path, e))?;
        }
        Ok(self.digests())
    }
}

/// Checks that every listed file exists under `dir` with the recorded digest.
pub fn verify_digests(dir: &Path, digests: &[FileDigest]) -> Result<()> {
    for entry in digests {
        let path = dir.join(&entry.name);
        let bytes = fs::read(&path).map_err(|e| LabError::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(LabError::Parse {
                what: entry.name.clone(),
                message: format!("digest {actual} does not match manifest {}", entry.sha256),
            });
        }
    }
    Ok(())
}

pub(crate) fn csv_error(what: &str) -> impl Fn(csv::Error) -> LabError + '_ {
    move |e| LabError::Parse {
        what: what.to_string(),
        message: e.to_string(),
    }
}

/// Formats an optional number for a CSV cell; `None` is an empty cell.
pub(crate) fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn written_files_verify_and_tampering_is_caught() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputSet::new();
        out.insert("b.csv", b"x\n1\n".to_vec());
        out.csv("a.csv", |buf| {
            buf.extend_from_slice(b"y\n2\n");
            Ok(())
        })
        .unwrap();
        let digests = out.write_to(dir.path()).unwrap();
        assert_eq!(
            digests.iter().map(|d| d.name.as_str()).collect::<Vec<_>>(),
            ["a.csv", "b.csv"]
        );
        verify_digests(dir.path(), &digests).unwrap();
        fs::write(dir.path().join("a.csv"), b"y\n3\n").unwrap();
        assert!(verify_digests(dir.path(), &digests).is_err());
    }

    #[test]
    fn empty_cells_for_missing_values() {
        assert_eq!(cell(None), "");
        assert_eq!(cell(Some(0.5)), "0.5");
    }
}
