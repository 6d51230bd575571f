//! Raw tensor files and small filesystem helpers.
//!
//! A tensor file is one line of JSON (`{"dtype":"float32","shape":[..],"field":".."}`)
//! terminated by `\n`, followed by the values as little-endian 32-bit floats in
//! C order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Raster;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub field: String,
}

pub fn write_tensor_file(path: &Path, field: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::Shape(format!(
            "tensor file {field}: shape {shape:?} holds {expected} values, got {}",
            data.len()
        )));
    }
    let header = TensorHeader {
        dtype: "float32".into(),
        shape: shape.to_vec(),
        field: field.into(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_tensor_file(path: &Path) -> Result<(TensorHeader, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Shape(format!("{}: missing tensor header", path.display())))?;
    let header: TensorHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.dtype != "float32" {
        return Err(Error::Shape(format!("{}: unsupported dtype {}", path.display(), header.dtype)));
    }
    let body = &bytes[nl + 1..];
    let n: usize = header.shape.iter().product();
    if body.len() != n * 4 {
        return Err(Error::Shape(format!(
            "{}: header promises {n} values, body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, data))
}

/// Stores an `H x W x C` raster (flows, pose maps) as a tensor file.
pub fn write_raster_tensor(path: &Path, field: &str, r: &Raster) -> Result<()> {
    write_tensor_file(path, field, &[r.height, r.width, r.channels], &r.data)
}

pub fn read_raster_tensor(path: &Path) -> Result<Raster> {
    let (h, data) = read_tensor_file(path)?;
    match h.shape.as_slice() {
        &[height, width, channels] => Raster::from_vec(height, width, channels, data),
        s => Err(Error::Shape(format!("{}: expected rank-3 tensor, got {s:?}", path.display()))),
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
