//! Middlebury `.flo` reader/writer.
//!
//! Layout, little-endian regardless of host: the 4-byte float 202021.25
//! (reads as "PIEH"), `i32` width, `i32` height, then `height * width`
//! interleaved `(u, v)` pairs of `f32`, row-major. Total size is exactly
//! `12 + 8 * width * height` bytes.

use crate::error::{Error, Result};
use crate::types::FlowField;
use ndarray::Array3;
use std::io::{Read, Write};
use std::path::Path;

pub const FLO_MAGIC: f32 = 202021.25;

/// Write a stride-1 flow field. Values are stored at `f32` precision.
pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    if flow.height() == 0 || flow.width() == 0 {
        return Err(Error::InvalidArgument("cannot write an empty flow".into()));
    }
    if flow.stride() != 1 {
        return Err(Error::InvalidArgument(format!(
            ".flo stores full-resolution flow; got stride {}",
            flow.stride()
        )));
    }
    let (h, w) = (flow.height(), flow.width());
    let mut bytes = Vec::with_capacity(12 + 8 * h * w);
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(w as i32).to_le_bytes());
    bytes.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            bytes.extend_from_slice(&(flow.vectors()[[y, x, 0]] as f32).to_le_bytes());
            bytes.extend_from_slice(&(flow.vectors()[[y, x, 1]] as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |reason: String| Error::Format {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < 12 {
        return Err(fail(format!("file too short: {} bytes", bytes.len())));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(fail(format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(fail(format!("implausible dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() != expected {
        return Err(fail(format!(
            "payload size mismatch: {} bytes, expected {expected} for {w}x{h}",
            bytes.len()
        )));
    }
    let mut vectors = Array3::zeros((h, w, 2));
    let mut off = 12;
    for y in 0..h {
        for x in 0..w {
            let u = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            let v = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
            if !u.is_finite() || !v.is_finite() {
                return Err(fail(format!("non-finite flow at ({x},{y})")));
            }
            vectors[[y, x, 0]] = u as f64;
            vectors[[y, x, 1]] = v as f64;
            off += 8;
        }
    }
    FlowField::new(vectors, 1)
}
