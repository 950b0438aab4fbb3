//! Flat binary checkpoints of named tensors.
//!
//! Layout: magic `JTAV`, version `u32`, then one record per tensor until EOF:
//! name length `u32`, UTF-8 name, rank `u32`, dims as `u64`, data as `f64`.
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"JTAV";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.origin, field, "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8], origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0, origin };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(origin, "magic", "expected JTAV"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(origin, "version", format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let len = r.u32("name_length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::format(origin, "name", e.to_string()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8, "data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::format(origin, "dims", e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(&store.named_tensors())).map_err(|e| Error::io(path, e))
}

pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    store.load_named(decode(&buf, path)?)
}
