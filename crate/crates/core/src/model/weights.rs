//! `PFWT` tensor container: weights, attacked image sets and other tensor
//! bundles all share it.
//!
//! ```text
//! "PFWT" | u32 version = 1 | u32 count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | u32 extents[rank] | f32 payload
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use thiserror::Error;

use super::{MiniInception, ModelError, IMAGE_SIZE};
use crate::tensor::{Tensor, TensorError, MAX_RANK};

pub const WEIGHT_MAGIC: &[u8; 4] = b"PFWT";
pub const WEIGHT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic {found:?} at offset 0, expected \"PFWT\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input at offset {offset}: need {needed} more bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },
    #[error("{extra} trailing bytes at offset {offset} after the declared tensor count")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("tensor name at offset {offset} is not valid UTF-8")]
    InvalidName { offset: usize },
    #[error("tensor {name:?} at offset {offset}: {source}")]
    InvalidTensor {
        name: String,
        offset: usize,
        #[source]
        source: TensorError,
    },
    #[error("tensor {name:?} at offset {offset} has rank {rank}")]
    InvalidRank { name: String, offset: usize, rank: u8 },
    #[error("name {0:?} is longer than 65535 bytes")]
    NameTooLong(String),
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>, FormatError> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| FormatError::NameTooLong(name.to_string()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - remaining,
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| FormatError::BadMagic {
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != WEIGHT_MAGIC {
        return Err(FormatError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u32("version")?;
    if version != WEIGHT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let start = r.pos;
        let name_len = u16::from_le_bytes(r.take(2, "tensor header")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(name_len as usize, "tensor name")?)
            .map_err(|_| FormatError::InvalidName { offset: start + 2 })?
            .to_string();
        let rank = r.take(1, "tensor rank")?[0];
        if rank as usize > MAX_RANK {
            return Err(FormatError::InvalidRank {
                name,
                offset: start,
                rank,
            });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u32("tensor extent")? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = r.take(len * 4, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|source| FormatError::InvalidTensor {
            name: name.clone(),
            offset: start,
            source,
        })?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            offset: r.pos,
            extra: bytes.len() - r.pos,
        });
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_tensor_file<'a>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), ModelError> {
    let path = path.as_ref();
    let bytes = encode_tensors(tensors)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>, ModelError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(decode_tensors(&bytes)?)
}

pub fn save_weights(model: &MiniInception, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let params = model.parameters();
    write_tensor_file(path, params.iter().map(|(n, t)| (n.as_str(), *t)))
}

/// Loads a model for the standard 32×32 input.
pub fn load_weights(path: impl AsRef<Path>) -> Result<MiniInception, ModelError> {
    MiniInception::from_parameters(read_tensor_file(path)?, IMAGE_SIZE)
}
