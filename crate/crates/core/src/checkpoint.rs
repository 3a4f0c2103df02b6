//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic       8 bytes  "FSCKPT01"
//! offset 8   manifest_len u64
//! offset 16  manifest     JSON (UTF-8)
//! then       data         f64 little-endian values, concatenated
//! ```
//!
//! The manifest lists `dtype` (`"f64"`), `byte_order` (`"little"`), and one
//! entry per tensor with its name, shape, and offset (in values) into the
//! data section, in declaration order. Loading validates magic, version,
//! lengths, and shape products.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FSCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    byte_order: String,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, counted in values (not bytes).
    offset: usize,
    len: usize,
}

/// Serialize a parameter set into the container format.
pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0usize;
    for (name, t) in params.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = Manifest {
        dtype: "f64".to_string(),
        byte_order: "little".to_string(),
        entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    let mut buf = Vec::with_capacity(offset * 8);
    for (_, t) in params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

/// Load a parameter set back from the container format.
pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint container (bad magic)",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + mlen {
        return Err(Error::Checkpoint("truncated manifest".to_string()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| Error::Checkpoint(format!("manifest parse error: {e}")))?;
    if manifest.dtype != "f64" || manifest.byte_order != "little" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype/byte order: {}/{}",
            manifest.dtype, manifest.byte_order
        )));
    }
    let data = &bytes[16 + mlen..];
    let total: usize = manifest.entries.iter().map(|e| e.len).sum();
    if data.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "data section holds {} bytes, manifest expects {}",
            data.len(),
            total * 8
        )));
    }
    let mut params = ParamSet::new();
    for e in &manifest.entries {
        let expect: usize = e.shape.iter().product();
        if expect != e.len {
            return Err(Error::Checkpoint(format!(
                "entry '{}' shape {:?} does not match len {}",
                e.name, e.shape, e.len
            )));
        }
        let start = e.offset * 8;
        let end = start + e.len * 8;
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "entry '{}' exceeds the data section",
                e.name
            )));
        }
        let values: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values));
    }
    Ok(params)
}
