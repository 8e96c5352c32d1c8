//! `.pcsw` weight files.
//!
//! ```text
//! "PCSW"              4 bytes magic
//! version             u32 LE (= 1)
//! count               u32 LE
//! count records:
//!   name_len          u8
//!   name              name_len bytes, UTF-8
//!   ndim              u8
//!   dims              ndim x u32 LE
//!   values            prod(dims) x f32 LE, row-major
//! ```
//!
//! Records are packed back to back with no padding. Metadata records (names
//! starting with `__`) reuse the same layout and carry raw little-endian
//! bytes in the value slots.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorcore::{Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"PCSW";
pub const VERSION: u32 = 1;

/// One named record. Values are kept as their little-endian byte image so
/// that decoding and re-encoding is bit-exact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    bytes: Vec<u8>,
}

impl Record {
    pub fn from_f32(name: impl Into<String>, dims: Vec<usize>, values: &[f32]) -> Result<Self> {
        let count: usize = dims.iter().product();
        if count != values.len() {
            return Err(Error::shape(format!(
                "record dims {dims:?} hold {count} values, got {}",
                values.len()
            )));
        }
        Ok(Record {
            name: name.into(),
            dims,
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        })
    }

    /// Stores a tensor; single-axis shapes `(1, c, 1, 1)` are written as 1-D.
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let dims = if s.n == 1 && s.h == 1 && s.w == 1 {
            vec![s.c]
        } else {
            s.dims().to_vec()
        };
        let values: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
        Self::from_f32(name, dims, &values)
    }

    /// Raw metadata bytes; length must be a multiple of 4.
    pub fn from_raw(name: impl Into<String>, bytes: Vec<u8>) -> Result<Self> {
        if !bytes.len().is_multiple_of(4) {
            return Err(Error::Contract("raw record length must be a multiple of 4".into()));
        }
        Ok(Record {
            name: name.into(),
            dims: vec![bytes.len() / 4],
            bytes,
        })
    }

    pub fn raw(&self) -> &[u8] {
        &self.bytes
    }

    pub fn values(&self) -> Vec<f32> {
        self.bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Decodes into a tensor of the expected shape. A 1-D record matches any
    /// shape with the same element count along a single non-unit axis.
    pub fn to_tensor<T: Scalar>(&self, expected: Shape) -> Result<Tensor<T>> {
        let matches = if self.dims.len() == 4 {
            self.dims == expected.dims()
        } else {
            self.numel() == expected.numel() && expected.dims().iter().filter(|&&d| d != 1).count() <= 1
        };
        if !matches {
            return Err(Error::shape(format!(
                "tensor '{}' has dims {:?}, expected {expected}",
                self.name, self.dims
            )));
        }
        Tensor::from_vec(expected, self.values().into_iter().map(|v| T::from_f64(v as f64)).collect())
    }
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(records.len()).map_err(|_| Error::Contract("too many records".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        let name_len = u8::try_from(name.len())
            .map_err(|_| Error::Contract(format!("record name '{}' longer than 255 bytes", r.name)))?;
        let ndim = u8::try_from(r.dims.len()).map_err(|_| Error::Contract("too many dims".into()))?;
        out.push(name_len);
        out.extend_from_slice(name);
        out.push(ndim);
        for &d in &r.dims {
            let d = u32::try_from(d).map_err(|_| Error::Contract("dimension exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&r.bytes);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated file: need {n} bytes for {what}, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"PCSW\"")));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = cur.u32("record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let start = cur.pos;
        let name_len = cur.u8("name length")? as usize;
        let name_bytes = cur.take(name_len, "record name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::format(start + 1, "record name is not UTF-8"))?
            .to_string();
        let ndim = cur.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32("dimension")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::format(cur.pos, format!("record '{name}' size overflows")))?;
        let values = cur.take(count, "record values")?.to_vec();
        records.push(Record {
            name,
            dims,
            bytes: values,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos, "trailing bytes after last record"));
    }
    Ok(records)
}

pub fn write_file(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let bytes = encode(records)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::Io(e).in_file(path.as_ref()))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Io(e).in_file(path))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

/// Record lookup that reports a missing name as a configuration error.
pub fn find<'a>(records: &'a [Record], name: &str) -> Option<&'a Record> {
    records.iter().find(|r| r.name == name)
}
