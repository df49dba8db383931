//! On-disk container shared by dataset and checkpoint files: a JSON
//! header followed by named little-endian f64 blobs, with a CRC-32 over
//! the blob section.
//!
//! Layout: 8-byte magic, u32 header length, header JSON, u32 CRC-32,
//! concatenated blobs in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

const MAGIC: &[u8; 8] = b"EDRLBIN\0";
pub const FORMAT_VERSION: u32 = 1;

/// One named f64 array in the blob section.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Blob {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let shape_len: usize = shape.iter().product();
        let name = name.into();
        if shape_len != data.len() {
            return Err(Error::InvalidArgument(format!(
                "blob `{name}`: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Blob { name, shape, data })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    blobs: Vec<BlobEntry>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

pub fn write_container(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    blobs: &[Blob],
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        blobs: blobs
            .iter()
            .map(|b| BlobEntry { name: b.name.clone(), shape: b.shape.clone(), len: b.data.len() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(FormatError::BadHeader(e.to_string())))?;
    let mut blob_bytes = Vec::with_capacity(blobs.iter().map(|b| b.data.len() * 8).sum());
    for b in blobs {
        for v in &b.data {
            blob_bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&blob_bytes);
    let mut out = Vec::with_capacity(16 + header_bytes.len() + blob_bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&blob_bytes);
    fs::write(path, out)?;
    Ok(())
}

/// Reads and validates a container, returning its meta JSON and blobs.
/// Truncation, checksum, and version failures are distinct errors.
pub fn read_container(path: &Path, expect_kind: &str) -> Result<(serde_json::Value, Vec<Blob>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format(FormatError::BadMagic));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end + 4 {
        return Err(Error::Format(FormatError::BadHeader(
            "file shorter than declared header".into(),
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::Format(FormatError::BadHeader(e.to_string())))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(FormatError::VersionMismatch {
            found: header.format_version,
            supported: FORMAT_VERSION,
        }));
    }
    if header.kind != expect_kind {
        return Err(Error::Format(FormatError::BadHeader(format!(
            "expected a {expect_kind} container, found `{}`",
            header.kind
        ))));
    }
    let stored_crc = u32::from_le_bytes(bytes[header_end..header_end + 4].try_into().unwrap());
    let blob_bytes = &bytes[header_end + 4..];
    // truncation before checksum so each failure is reported as itself
    let mut offset = 0usize;
    for entry in &header.blobs {
        let need = entry.len * 8;
        if blob_bytes.len() < offset + need {
            return Err(Error::Format(FormatError::TruncatedBlob {
                field: entry.name.clone(),
                expected: need,
                actual: blob_bytes.len().saturating_sub(offset),
            }));
        }
        offset += need;
    }
    let computed_crc = crc32fast::hash(blob_bytes);
    if computed_crc != stored_crc {
        return Err(Error::Format(FormatError::ChecksumMismatch {
            stored: stored_crc,
            computed: computed_crc,
        }));
    }
    let mut blobs = Vec::with_capacity(header.blobs.len());
    let mut offset = 0usize;
    for entry in header.blobs {
        let data: Vec<f64> = (0..entry.len)
            .map(|i| {
                let at = offset + i * 8;
                f64::from_le_bytes(blob_bytes[at..at + 8].try_into().unwrap())
            })
            .collect();
        offset += entry.len * 8;
        blobs.push(Blob::new(entry.name, entry.shape, data)?);
    }
    Ok((header.meta, blobs))
}
