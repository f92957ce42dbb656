//! Binary container of named `f64` blocks.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic    b"CFMPBLK\0"
//! version  1
//! count    number of blocks
//! count × { name_len, name (utf-8), rows, cols, rows*cols × f64 LE }
//! ```
//!
//! Blocks are written in byte order of their names, so a write → read → write
//! cycle reproduces the file exactly.

use std::collections::BTreeMap;
use std::path::Path;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CFMPBLK\0";
pub const VERSION: u32 = 1;

pub fn encode(blocks: &BTreeMap<String, Tensor2>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor2>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut blocks = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| Error::Format(format!("block name: {e}")))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64()?);
        }
        if blocks
            .insert(name.clone(), Tensor2::from_vec(rows, cols, data)?)
            .is_some()
        {
            return Err(Error::Format(format!("duplicate block `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(blocks)
}

pub fn write_file(path: &Path, blocks: &BTreeMap<String, Tensor2>) -> Result<()> {
    std::fs::write(path, encode(blocks)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<BTreeMap<String, Tensor2>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
