//! The `ALPS` checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! 0..4      magic "ALPS"
//! 4..8      u32 version (1)
//! 8..16     u64 header length H
//! 16..16+H  UTF-8 JSON header {"meta": {...}, "tensors": {name: {dtype, shape, offset, nbytes}}}
//! 16+H..    data blob; offsets are relative to the blob start
//! ```
//!
//! Tensors are laid out in lexicographic name order, each starting on an
//! 8-byte boundary with zero padding in between. The header is padded with
//! trailing spaces so the blob itself starts 8-byte aligned in the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::ModelGeometry;
use crate::tensor::{DType, Tensor, TensorData};

pub const MAGIC: &[u8; 4] = b"ALPS";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;
const ALIGN: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    #[serde(default)]
    pub meta: Map<String, Value>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

impl CheckpointManifest {
    /// Build the manifest that `tensors` would be written with.
    pub fn describe(meta: Map<String, Value>, tensors: &BTreeMap<String, Tensor>) -> Self {
        let mut offset = 0usize;
        let mut entries = BTreeMap::new();
        for (name, t) in tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: t.dtype(),
                    shape: t.shape().to_vec(),
                    offset: offset as u64,
                    nbytes: t.nbytes() as u64,
                },
            );
            offset = align_up(offset + t.nbytes());
        }
        Self { meta, tensors: entries }
    }

    pub fn with_geometry(geometry: &ModelGeometry, tensors: &BTreeMap<String, Tensor>) -> Self {
        Self::describe(geometry.to_meta(), tensors)
    }

    /// Geometry embedded in the meta block, if any.
    pub fn geometry(&self) -> Result<Option<ModelGeometry>> {
        ModelGeometry::from_meta(&self.meta)
    }

    fn blob_len(&self) -> usize {
        self.tensors.values().map(|e| align_up(e.offset as usize + e.nbytes as usize)).max().unwrap_or(0)
    }

    fn check_required_names(&self) -> Result<()> {
        if let Some(geometry) = self.geometry()? {
            for name in geometry.attention_tensor_names() {
                if !self.tensors.contains_key(&name) {
                    return Err(Error::MissingTensor(name));
                }
            }
        }
        Ok(())
    }
}

/// A checkpoint held in memory; tensors are decoded on request.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    manifest: CheckpointManifest,
    blob: Vec<u8>,
    fingerprint: String,
}

impl Checkpoint {
    pub fn manifest(&self) -> &CheckpointManifest {
        &self.manifest
    }

    /// The serialized container; identical to what was read or built.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.manifest, &self.tensors()?)
    }

    /// Hex SHA-256 of the serialized container.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn geometry(&self) -> Result<Option<ModelGeometry>> {
        self.manifest.geometry()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.tensors.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.manifest.tensors.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.manifest.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self.entry(name)?;
        let start = entry.offset as usize;
        let bytes = &self.blob[start..start + entry.nbytes as usize];
        let data = decode(entry.dtype, bytes);
        Tensor::new(entry.shape.clone(), data)
    }

    /// Shape plus elements widened to binary64.
    pub fn tensor_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let t = self.tensor(name)?;
        Ok((t.shape().to_vec(), t.to_f64_vec()))
    }

    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.manifest.tensors.keys().map(|name| Ok((name.clone(), self.tensor(name)?))).collect()
    }

    /// Encode tensors and parse the result back, yielding the exact
    /// checkpoint a write/read cycle would produce.
    pub fn from_tensors(meta: Map<String, Value>, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let manifest = CheckpointManifest::describe(meta, tensors);
        let bytes = encode(&manifest, tensors)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic, expected \"ALPS\"".into()));
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::Corrupt("truncated preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| Error::Corrupt(format!("header length {header_len} exceeds file")))?
            as usize;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
        let blob = &bytes[header_end..];
        validate_layout(&manifest, blob.len())?;
        manifest.check_required_names()?;

        let ckpt = Checkpoint { manifest, blob: blob.to_vec(), fingerprint: hex::encode(Sha256::digest(bytes)) };
        for (name, entry) in &ckpt.manifest.tensors {
            let start = entry.offset as usize;
            let raw = &ckpt.blob[start..start + entry.nbytes as usize];
            if !all_finite(entry.dtype, raw) {
                return Err(Error::Value(format!("tensor `{name}` contains NaN or infinite values")));
            }
        }
        Ok(ckpt)
    }
}

fn validate_layout(manifest: &CheckpointManifest, blob_len: usize) -> Result<()> {
    let mut spans = Vec::with_capacity(manifest.tensors.len());
    for (name, e) in &manifest.tensors {
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(Error::Corrupt(format!("tensor `{name}` has invalid shape {:?}", e.shape)));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` shape overflows")))?;
        if numel.checked_mul(e.dtype.size() as u64) != Some(e.nbytes) {
            return Err(Error::Corrupt(format!("tensor `{name}` declares {} bytes for shape {:?}", e.nbytes, e.shape)));
        }
        if e.offset % ALIGN as u64 != 0 {
            return Err(Error::Corrupt(format!("tensor `{name}` offset {} is not 8-byte aligned", e.offset)));
        }
        let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= blob_len as u64).ok_or_else(|| {
            Error::Corrupt(format!("tensor `{name}` spans {}+{} bytes in a {blob_len}-byte blob", e.offset, e.nbytes))
        })?;
        spans.push((e.offset, end, name));
    }
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Corrupt(format!("tensors `{}` and `{}` overlap", pair[0].2, pair[1].2)));
        }
    }
    Ok(())
}

fn decode(dtype: DType, bytes: &[u8]) -> TensorData {
    match dtype {
        DType::F32 => {
            TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        DType::F64 => {
            TensorData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        }
    }
}

fn all_finite(dtype: DType, bytes: &[u8]) -> bool {
    match dtype {
        DType::F32 => bytes.chunks_exact(4).all(|c| f32::from_le_bytes(c.try_into().unwrap()).is_finite()),
        DType::F64 => bytes.chunks_exact(8).all(|c| f64::from_le_bytes(c.try_into().unwrap()).is_finite()),
    }
}

/// Serialize a manifest and its tensors to container bytes.
///
/// Offsets are recomputed from the tensors; the manifest must agree with the
/// tensors on names, dtypes and shapes.
pub fn encode(manifest: &CheckpointManifest, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    if manifest.tensors.len() != tensors.len() {
        return Err(Error::Value(format!(
            "manifest lists {} tensors but {} were provided",
            manifest.tensors.len(),
            tensors.len()
        )));
    }
    for (name, t) in tensors {
        let entry =
            manifest.tensors.get(name).ok_or_else(|| Error::Value(format!("tensor `{name}` missing from manifest")))?;
        if entry.dtype != t.dtype() || entry.shape != t.shape() {
            return Err(Error::Value(format!(
                "tensor `{name}` is {:?}{:?} but manifest declares {:?}{:?}",
                t.dtype(),
                t.shape(),
                entry.dtype,
                entry.shape
            )));
        }
        if !t.all_finite() {
            return Err(Error::Value(format!("tensor `{name}` contains NaN or infinite values")));
        }
    }
    let canonical = CheckpointManifest::describe(manifest.meta.clone(), tensors);
    canonical.check_required_names()?;

    let mut header = serde_json::to_vec(&canonical)?;
    let padded = align_up(PREAMBLE + header.len()) - PREAMBLE;
    header.resize(padded, b' ');

    let blob_len = canonical.blob_len();
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + blob_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let blob_start = out.len();
    for (name, t) in tensors {
        let entry = &canonical.tensors[name];
        out.resize(blob_start + entry.offset as usize, 0);
        t.write_le(&mut out);
    }
    out.resize(blob_start + blob_len, 0);
    Ok(out)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

pub fn write_checkpoint(
    manifest: &CheckpointManifest,
    tensors: &BTreeMap<String, Tensor>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode(manifest, tensors)?;
    fs::write(path, bytes)?;
    Ok(())
}
