//! Portable weight container.
//!
//! ```text
//! header (16 bytes)
//!   magic     "E2EW"
//!   u16       version = 1
//!   u16       reserved = 0
//!   u32       tensor count
//!   u32       reserved = 0
//! per tensor, sorted by name
//!   u16       name length, then UTF-8 name bytes
//!   u8        dtype (0 = f32)
//!   u8        ndims, then ndims x u32 dims
//!   f32 x n   little-endian data, n = product(dims)
//! ```
//! All integers are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::nn::{Tensor, WeightStore};

pub const MAGIC: &[u8; 4] = b"E2EW";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightFormatError {
    #[error("bad magic {0:02x?}, expected \"E2EW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported weight format version {0}")]
    UnsupportedVersion(u16),
    #[error("reserved header field at byte {0} is not zero")]
    ReservedNonZero(usize),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {0:?} is out of name order")]
    Unsorted(String),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor {name:?} has unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: u8 },
    #[error("tensor {0:?} has an invalid shape")]
    BadShape(String),
    #[error("{0} unexpected bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("cannot encode: {0}")]
    Unencodable(String),
}

type FormatResult<T> = std::result::Result<T, WeightFormatError>;

pub fn encode(store: &WeightStore<f32>) -> FormatResult<Vec<u8>> {
    let count = u32::try_from(store.len())
        .map_err(|_| WeightFormatError::Unencodable("too many tensors".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + store.num_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for (name, t) in store.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| WeightFormatError::Unencodable(format!("name {name:?} too long")))?;
        let ndims = u8::try_from(t.ndim())
            .map_err(|_| WeightFormatError::Unencodable(format!("{name} has too many dims")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(ndims);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| WeightFormatError::Unencodable(format!("{name} dim too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> FormatResult<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(WeightFormatError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> FormatResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> FormatResult<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> FormatResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> FormatResult<WeightStore<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(WeightFormatError::BadMagic(magic));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(WeightFormatError::UnsupportedVersion(version));
    }
    if r.u16("header")? != 0 {
        return Err(WeightFormatError::ReservedNonZero(6));
    }
    let count = r.u32("tensor count")?;
    if r.u32("header")? != 0 {
        return Err(WeightFormatError::ReservedNonZero(12));
    }

    let mut store = WeightStore::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| WeightFormatError::BadName)?
            .to_string();
        if let Some(p) = &prev {
            match p.as_str().cmp(&name) {
                std::cmp::Ordering::Equal => return Err(WeightFormatError::DuplicateName(name)),
                std::cmp::Ordering::Greater => return Err(WeightFormatError::Unsorted(name)),
                std::cmp::Ordering::Less => {}
            }
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(WeightFormatError::UnsupportedDtype { name, dtype });
        }
        let ndims = r.u8("ndims")? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| WeightFormatError::BadShape(name.clone()))?;
        let raw = r.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|_| WeightFormatError::BadShape(name.clone()))?;
        store
            .insert(name.clone(), t)
            .map_err(|_| WeightFormatError::DuplicateName(name.clone()))?;
        prev = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(WeightFormatError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(store)
}

pub fn save_weights(store: &WeightStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Short content digest used as the default model version string.
pub fn digest_version(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    let hex: String = d[..6].iter().map(|b| format!("{b:02x}")).collect();
    format!("e2ew-{hex}")
}
