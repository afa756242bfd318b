//! Checkpoints: a JSON manifest describing structure plus one binary blob
//! of little-endian `f64` parameter values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Parameters, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes).
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Default)]
pub struct BlobWriter {
    values: Vec<f64>,
    entries: Vec<BlobEntry>,
}

impl BlobWriter {
    /// Moves every tensor of `owner` into the blob under `prefix.name`.
    pub fn take_all(&mut self, prefix: &str, owner: &mut dyn Parameters) {
        owner.visit_params_mut(&mut |name, t| {
            let shape = t.shape().to_vec();
            let data = t.strip();
            self.entries.push(BlobEntry {
                name: format!("{prefix}.{name}"),
                shape,
                offset: self.values.len(),
                len: data.len(),
            });
            self.values.extend(data);
        });
    }

    pub fn finish(self) -> (Vec<u8>, Vec<BlobEntry>) {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        (bytes, self.entries)
    }
}

pub struct BlobReader {
    values: Vec<f64>,
    entries: BTreeMap<String, BlobEntry>,
}

impl BlobReader {
    pub fn new(bytes: &[u8], entries: &[BlobEntry]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::corrupt(BLOB_FILE, format!("length {} is not a multiple of 8", bytes.len())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut map = BTreeMap::new();
        for e in entries {
            if e.offset + e.len > values.len() {
                return Err(Error::corrupt(
                    e.name.clone(),
                    format!("needs values {}..{} but the blob holds {}", e.offset, e.offset + e.len, values.len()),
                ));
            }
            map.insert(e.name.clone(), e.clone());
        }
        Ok(Self { values, entries: map })
    }

    /// Refills every stripped tensor of `owner` from the blob.
    pub fn restore_all(&self, prefix: &str, owner: &mut dyn Parameters) -> Result<()> {
        let mut result = Ok(());
        owner.visit_params_mut(&mut |name, t: &mut Tensor| {
            if result.is_err() {
                return;
            }
            let full = format!("{prefix}.{name}");
            result = match self.entries.get(&full) {
                None => Err(Error::corrupt(full, "missing from blob index")),
                Some(e) if e.shape != t.shape() => Err(Error::corrupt(
                    full,
                    format!("shape {:?} in blob vs {:?} in manifest", e.shape, t.shape()),
                )),
                Some(e) => t
                    .restore(self.values[e.offset..e.offset + e.len].to_vec())
                    .map_err(|err| Error::corrupt(full, err.to_string())),
            };
        });
        result
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
