//! Binary container for checkpoints and trainer state.
//!
//! Layout: an 8-byte magic, a u32 format version, a key-value text section,
//! then named tensor blobs (name, dims, little-endian f32 data), and finally
//! a SHA-256 checksum over everything before it. All integers little-endian.

use crate::fsutil::write_atomic;
use crate::tensor::Scalar;
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a {expected} file (bad magic)")]
    BadMagic { path: String, expected: String },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("checksum mismatch, file is corrupt: {0}")]
    ChecksumMismatch(String),
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("malformed container: {0}")]
    Malformed(String),
}

/// A named tensor blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Decoded container contents.
#[derive(Debug, Clone)]
pub struct Container {
    pub kv: Vec<(String, String)>,
    pub blobs: Vec<Blob>,
}

impl Container {
    pub fn value(&self, key: &str) -> Option<&str> {
        self.kv
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }
}

pub fn save(
    path: &Path,
    magic: &[u8; 8],
    kv: &[(String, String)],
    blobs: &[Blob],
) -> Result<(), ContainerError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

    let mut kv_text = String::new();
    for (k, v) in kv {
        debug_assert!(!k.contains('\n') && !v.contains('\n'));
        kv_text.push_str(k);
        kv_text.push('=');
        kv_text.push_str(v);
        kv_text.push('\n');
    }
    out.extend_from_slice(&(kv_text.len() as u32).to_le_bytes());
    out.extend_from_slice(kv_text.as_bytes());

    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for blob in blobs {
        let name = blob.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(blob.dims.len() as u32).to_le_bytes());
        for &d in &blob.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&((blob.data.len() * 4) as u64).to_le_bytes());
        for &v in &blob.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    write_atomic(path, &out).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.bytes.len() {
            return Err(ContainerError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path, magic: &[u8; 8]) -> Result<Container, ContainerError> {
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 44 || &bytes[..8] != magic {
        return Err(ContainerError::BadMagic {
            path: path.display().to_string(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let body_len = bytes.len() - 32;
    let digest = Sha256::digest(&bytes[..body_len]);
    if digest.as_slice() != &bytes[body_len..] {
        return Err(ContainerError::ChecksumMismatch(path.display().to_string()));
    }

    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 8,
    };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let kv_len = r.u32("kv length")? as usize;
    let kv_text = std::str::from_utf8(r.take(kv_len, "kv section")?)
        .map_err(|_| ContainerError::Malformed("kv section is not UTF-8".into()))?;
    let kv = kv_text
        .lines()
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| ContainerError::Malformed(format!("kv line {line:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n_blobs = r.u32("blob count")? as usize;
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| ContainerError::Malformed("blob name is not UTF-8".into()))?
            .to_string();
        let ndims = r.u32("ndims")? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u64("dim")? as usize);
        }
        let byte_len = r.u64("data length")? as usize;
        let expect: usize = dims.iter().product::<usize>() * 4;
        if byte_len != expect {
            return Err(ContainerError::Malformed(format!(
                "blob {name:?} has {byte_len} bytes for dims {dims:?}"
            )));
        }
        let raw = r.take(byte_len, "blob data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blobs.push(Blob { name, dims, data });
    }
    Ok(Container { kv, blobs })
}

/// Cast a scalar slice to the container's f32 storage.
pub fn to_f32<S: Scalar>(data: &[S]) -> Vec<f32> {
    data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()
}

/// Cast f32 storage back to the working scalar type.
pub fn from_f32<S: Scalar>(data: &[f32]) -> Vec<S> {
    data.iter().map(|&v| S::from_f32(v).unwrap()).collect()
}
