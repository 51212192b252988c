//! Checkpoint container: a JSON manifest describing named tensors and a flat
//! little-endian `f64` blob holding their values back to back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("blob size {actual} bytes does not match manifest total {expected}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    /// Byte offset of each tensor in the blob.
    pub offsets: Vec<u64>,
    pub total_bytes: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Serializes to `(manifest JSON, blob)`.
    pub fn encode(&self) -> Result<(String, Vec<u8>), CheckpointError> {
        let mut blob = Vec::new();
        let mut manifest = Manifest {
            version: CHECKPOINT_VERSION,
            names: Vec::with_capacity(self.tensors.len()),
            shapes: Vec::with_capacity(self.tensors.len()),
            offsets: Vec::with_capacity(self.tensors.len()),
            total_bytes: 0,
            meta: self.meta.clone(),
        };
        for (name, t) in &self.tensors {
            manifest.names.push(name.clone());
            manifest.shapes.push(t.shape().to_vec());
            manifest.offsets.push(blob.len() as u64);
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        manifest.total_bytes = blob.len() as u64;
        Ok((serde_json::to_string_pretty(&manifest)?, blob))
    }

    pub fn decode(manifest: &str, blob: &[u8]) -> Result<Self, CheckpointError> {
        let m: Manifest = serde_json::from_str(manifest)?;
        if m.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Corrupt(format!("unsupported version {}", m.version)));
        }
        if m.total_bytes != blob.len() as u64 {
            return Err(CheckpointError::SizeMismatch {
                expected: m.total_bytes,
                actual: blob.len() as u64,
            });
        }
        if m.names.len() != m.shapes.len() || m.names.len() != m.offsets.len() {
            return Err(CheckpointError::Corrupt("manifest arrays differ in length".into()));
        }
        let mut tensors = Vec::with_capacity(m.names.len());
        let mut expected_offset = 0u64;
        for ((name, shape), &offset) in m.names.iter().zip(&m.shapes).zip(&m.offsets) {
            let count: usize = shape.iter().product();
            let bytes = count as u64 * 8;
            if offset != expected_offset || offset + bytes > m.total_bytes {
                return Err(CheckpointError::Corrupt(format!("bad offset for {name}")));
            }
            let start = offset as usize;
            let data = blob[start..start + count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape.clone(), data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.push((name.clone(), t));
            expected_offset += bytes;
        }
        if expected_offset != m.total_bytes {
            return Err(CheckpointError::SizeMismatch {
                expected: expected_offset,
                actual: m.total_bytes,
            });
        }
        Ok(Self { meta: m.meta, tensors })
    }

    /// Writes `<base>.json` and `<base>.bin`.
    pub fn save(&self, base: &Path) -> Result<(), CheckpointError> {
        let (manifest, blob) = self.encode()?;
        let (mpath, bpath) = paths(base);
        if let Some(parent) = mpath.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(mpath, manifest)?;
        fs::write(bpath, blob)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self, CheckpointError> {
        let (mpath, bpath) = paths(base);
        let manifest = fs::read_to_string(mpath)?;
        let blob = fs::read(bpath)?;
        Self::decode(&manifest, &blob)
    }
}

/// Manifest and blob paths for a checkpoint base path.
pub fn paths(base: &Path) -> (PathBuf, PathBuf) {
    let mut m = base.as_os_str().to_owned();
    m.push(".json");
    let mut b = base.as_os_str().to_owned();
    b.push(".bin");
    (PathBuf::from(m), PathBuf::from(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({"dim": 2}),
            tensors: vec![
                ("a".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, 1e-300]).unwrap()),
                ("b".into(), Tensor::vector(vec![0.125])),
            ],
        }
    }

    #[test]
    fn blob_size_mismatch_rejected() {
        let (m, mut blob) = sample().encode().unwrap();
        blob.pop();
        assert!(matches!(
            Checkpoint::decode(&m, &blob),
            Err(CheckpointError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        sample().save(&base).unwrap();
        assert_eq!(Checkpoint::load(&base).unwrap(), sample());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(vals in proptest::collection::vec(-1e6f64..1e6, 0..40)) {
            let ck = Checkpoint {
                meta: serde_json::Value::Null,
                tensors: vec![("v".into(), Tensor::vector(vals))],
            };
            let (m, b) = ck.encode().unwrap();
            prop_assert_eq!(Checkpoint::decode(&m, &b).unwrap(), ck);
        }
    }
}
