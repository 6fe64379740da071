//! `PFW1` weights container.
//!
//! Layout (all integers `u64` little-endian, floats `f64` little-endian):
//! magic `b"PFW1"`, tensor count, then per tensor: name length, UTF-8 name,
//! rank, dims, data. Optimizer state is not stored.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PFW1";

pub fn write_weights<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn encode_weights(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_weights(store, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(AutodiffError::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn bounded(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        // a length larger than the remaining input can never be valid
        if v > self.buf.len() as u64 {
            return Err(AutodiffError::Format {
                offset: at as u64,
                message: format!("{what} {v} exceeds file size"),
            });
        }
        Ok(v as usize)
    }
}

pub fn decode_weights(buf: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(AutodiffError::Format {
            offset: 0,
            message: "bad magic, expected PFW1".into(),
        });
    }
    let count = c.bounded("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = c.bounded("name length")?;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|e| AutodiffError::Format {
                offset: at as u64,
                message: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = c.bounded("rank")?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.bounded("dimension")?);
        }
        let numel: usize = dims.iter().product();
        let at = c.pos;
        let bytes = c.take(numel.saturating_mul(8), "tensor data")?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| AutodiffError::Format {
            offset: at as u64,
            message: e.to_string(),
        })?;
        store.insert(name, t).map_err(|e| AutodiffError::Format {
            offset: at as u64,
            message: e.to_string(),
        })?;
    }
    if c.pos != buf.len() {
        return Err(AutodiffError::Format {
            offset: c.pos as u64,
            message: "trailing bytes after last tensor".into(),
        });
    }
    Ok(store)
}

pub fn save_weights(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_weights(store))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamStore> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_weights(&buf)
}
