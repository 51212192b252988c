//! Run manifests: what ran, with which config, and SHA-256 of every file read
//! or written.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_ms: u128,
    #[serde(skip)]
    primary: PathBuf,
    #[serde(skip)]
    skip: bool,
    #[serde(skip)]
    pending_inputs: Vec<PathBuf>,
    #[serde(skip)]
    pending_outputs: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>, primary: &Path) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_ms: 0,
            primary: primary.to_path_buf(),
            skip: false,
            pending_inputs: Vec::new(),
            pending_outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.pending_inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.pending_outputs.push(path.to_path_buf());
    }

    /// No default location (output went to stdout).
    pub fn skip(&mut self) {
        self.skip = true;
    }

    /// Hashes the recorded files and writes the manifest to `explicit` or
    /// `<primary>.manifest.json`.
    pub fn finish(mut self, started: Instant, explicit: Option<&Path>) -> io::Result<()> {
        let target = match explicit {
            Some(p) => p.to_path_buf(),
            None if self.skip => return Ok(()),
            None => {
                let mut s = self.primary.as_os_str().to_owned();
                s.push(".manifest.json");
                PathBuf::from(s)
            }
        };
        let hash = |paths: &[PathBuf]| -> io::Result<Vec<FileHash>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileHash {
                        path: p.display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        self.inputs = hash(&self.pending_inputs)?;
        self.outputs = hash(&self.pending_outputs)?;
        self.wall_ms = started.elapsed().as_millis();
        let text = serde_json::to_string_pretty(&self).map_err(io::Error::other)? + "\n";
        if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(target, text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
