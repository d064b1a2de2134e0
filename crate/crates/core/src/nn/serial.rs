//! Binary weights container.
//!
//! Layout: magic `SFW1` | entry count u32 LE | per manifest entry:
//! layer index u32, rank u32, dims u32 x rank | payload: parameters as
//! IEEE-754 binary32 little-endian in manifest order.

use super::weights::{ManifestEntry, Weights};
use super::NnError;

pub const MAGIC: &[u8; 4] = b"SFW1";

pub fn serialize(w: &Weights) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + w.manifest.len() * 24 + w.values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(w.manifest.len() as u32).to_le_bytes());
    for entry in &w.manifest {
        out.extend_from_slice(&entry.layer_index.to_le_bytes());
        out.extend_from_slice(&(entry.dims.len() as u32).to_le_bytes());
        for &d in &entry.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    for v in &w.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<Weights, NnError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], NnError> {
        if *pos + n > bytes.len() {
            return Err(NnError::Truncated { at: *pos, wanted: n, len: bytes.len() });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4)?;
    if magic != MAGIC {
        return Err(NnError::BadMagic);
    }
    let entry_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut manifest = Vec::with_capacity(entry_count);
    let mut offset = 0usize;
    for _ in 0..entry_count {
        let layer_index = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if rank == 0 || rank > 8 {
            return Err(NnError::BadContainer(format!("rank {} out of range", rank)));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            if d == 0 {
                return Err(NnError::BadContainer("zero dimension".into()));
            }
            dims.push(d);
        }
        let len: usize = dims.iter().map(|&d| d as usize).product();
        manifest.push(ManifestEntry { layer_index, dims, offset });
        offset += len;
    }
    let payload = take(&mut pos, offset * 4)?;
    if pos != bytes.len() {
        return Err(NnError::BadContainer(format!(
            "{} trailing bytes after payload",
            bytes.len() - pos
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Weights { values, manifest })
}
