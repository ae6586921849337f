//! Little-endian tensor container shared by concept bundles and latent dumps.
//!
//! Layout: magic `LCB1`, `u32` version (1), `u32` tensor count, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32` extents
//! and an `f32` payload. Values are widened to `f64` on read.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LCB1";
pub const VERSION: u32 = 1;

/// One named entry. A rank-0 entry (`dims` empty) holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Self {
        Entry {
            name: name.into(),
            dims,
            values,
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, vec![], vec![value])
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count =
        u32::try_from(entries.len()).map_err(|_| Error::Argument("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Argument(format!("tensor name {:?} too long", e.name)))?;
        let ndim = u8::try_from(e.dims.len())
            .map_err(|_| Error::Argument(format!("tensor {:?} has too many dims", e.name)))?;
        let numel: usize = e.dims.iter().product();
        if numel != e.values.len() {
            return Err(Error::Shape(format!(
                "tensor {:?}: dims {:?} vs {} values",
                e.name,
                e.dims,
                e.values.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(ndim);
        for &d in &e.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Argument(format!("tensor {:?} extent too large", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &e.values {
            let narrow = v as f32;
            if !narrow.is_finite() {
                return Err(Error::Data(format!(
                    "tensor {:?}: value {v} is not representable as a finite f32",
                    e.name
                )));
            }
            out.extend_from_slice(&narrow.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r
        .take(4)
        .ok_or_else(|| Error::Format("file shorter than magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    let version = r
        .u32()
        .ok_or_else(|| Error::Format("missing version".into()))?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r
        .u32()
        .ok_or_else(|| Error::Format("missing tensor count".into()))?;
    let mut entries = Vec::new();
    for k in 0..count {
        let header = |what: &str| Error::Format(format!("truncated header of tensor #{k}: {what}"));
        let name_len = r.u16().ok_or_else(|| header("name length"))?;
        let name = r
            .take(usize::from(name_len))
            .ok_or_else(|| header("name"))?;
        let name = std::str::from_utf8(name)
            .map_err(|_| Error::Format(format!("tensor #{k} name is not UTF-8")))?
            .to_string();
        let ndim = r.u8().ok_or_else(|| header("rank"))?;
        let mut dims = Vec::with_capacity(usize::from(ndim));
        for _ in 0..ndim {
            let d = r.u32().ok_or_else(|| {
                Error::Format(format!("truncated header of tensor {name:?}: extents"))
            })?;
            dims.push(d as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Data(format!("tensor {name:?}: element count overflows")))?;
        let payload = numel
            .checked_mul(4)
            .and_then(|n| r.take(n))
            .ok_or_else(|| {
                Error::Data(format!(
                    "tensor {name:?}: payload truncated (needs {numel} f32 values)"
                ))
            })?;
        let mut values = Vec::with_capacity(numel);
        for (i, c) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "tensor {name:?}: non-finite value at index {i}"
                )));
            }
            values.push(f64::from(v));
        }
        entries.push(Entry { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn write(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Looks up a required entry by name.
pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Validation(format!("missing required tensor {name:?}")))
}
