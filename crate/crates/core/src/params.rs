//! Named parameter sets and their on-disk layout.
//!
//! A parameter file pair is a JSON manifest plus a raw payload:
//!
//! ```text
//! <stem>.json   { "payload": "<stem>.bin", "sha256": "...", "params": [{"name", "shape"}, ...], ... }
//! <stem>.bin    every tensor's values as little-endian f64, in manifest order
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Manifest(format!("missing parameter `{name}`")))?;
        Ok(self.entries.remove(pos).1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Encodes every tensor as little-endian f64 in order.
pub fn encode_payload(params: &ParamSet) -> (Vec<ParamEntry>, Vec<u8>) {
    let mut bytes = Vec::with_capacity(params.total_elements() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (entries, bytes)
}

/// Inverse of [`encode_payload`].
pub fn decode_payload(entries: &[ParamEntry], bytes: &[u8]) -> Result<ParamSet> {
    let expected: usize = entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 8)
        .sum();
    if expected != bytes.len() {
        return Err(Error::Dimension(format!(
            "parameter payload holds {} bytes, manifest shapes need {expected}",
            bytes.len()
        )));
    }
    let mut set = ParamSet::new();
    let mut chunks = bytes.chunks_exact(8);
    for e in entries {
        let n: usize = e.shape.iter().product();
        let data = chunks
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        set.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(set)
}

/// Path of the payload that sits next to a manifest.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
