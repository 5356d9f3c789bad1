//! Weight container: an 8-byte little-endian manifest length, a JSON manifest
//! (name → shape, dtype, byte offset), then the raw little-endian payload.
//!
//! Offsets are relative to the first payload byte. Values are stored as their
//! exact IEEE-754 bit patterns, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "iwin-weights";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<ManifestEntry>,
}

pub fn write_weights<W: Write>(mut out: W, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let nbytes = (t.numel() * 8) as u64;
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        tensors: entries,
    };
    let header = serde_json::to_vec(&manifest)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, t) in tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_weights<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > (1 << 32) {
        return Err(Error::Format(format!("implausible manifest length {len}")));
    }
    let mut header = vec![0u8; len as usize];
    input.read_exact(&mut header)?;
    let manifest: Manifest = serde_json::from_slice(&header)?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        let end = e
            .offset
            .checked_add(e.nbytes)
            .filter(|&end| end <= payload.len() as u64);
        let (Some(end), true) = (end, e.nbytes == numel as u64 * 8) else {
            return Err(Error::Format(format!("{}: payload range out of bounds", e.name)));
        };
        let bytes = &payload[e.offset as usize..end as usize];
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

pub fn save_weights(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    write_weights(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_weights(BufReader::new(File::open(path)?))
}
