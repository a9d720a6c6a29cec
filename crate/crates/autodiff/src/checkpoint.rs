//! Parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "UGDF1\0" | count | count x ( name_len | name | rank | extents[rank] | f32 values )
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"UGDF1\0";

pub fn encode(arrays: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(arrays.len() as u32).unwrap();
    for (name, t) in arrays {
        out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u32::<LittleEndian>(t.rank() as u32).unwrap();
        for &e in t.shape() {
            out.write_u32::<LittleEndian>(e as u32).unwrap();
        }
        for &v in t.data() {
            out.write_f32::<LittleEndian>(v as f32).unwrap();
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> AutodiffError {
        AutodiffError::Checkpoint {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(self.err(format!(
                "truncated {what}: expected {n} bytes, found {remaining}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        c.pos = 0;
        return Err(c.err("bad magic, expected \"UGDF1\\0\""));
    }
    let count = c.u32("array count")?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let start = c.pos;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| AutodiffError::Checkpoint {
                offset: start as u64,
                msg: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = c.u32("extent")?;
            numel = numel.saturating_mul(e as u64);
            shape.push(e as usize);
        }
        let bytes_needed = numel.saturating_mul(4);
        if bytes_needed > (c.bytes.len() - c.pos) as u64 {
            return Err(c.err(format!(
                "truncated values of `{name}`: expected {bytes_needed} bytes, found {}",
                c.bytes.len() - c.pos
            )));
        }
        let raw = c.take(bytes_needed as usize, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if arrays.contains_key(&name) {
            return Err(c.err(format!("duplicate array `{name}`")));
        }
        arrays.insert(name, Tensor::new(&shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes after last array"));
    }
    Ok(arrays)
}

pub fn save(path: impl AsRef<Path>, arrays: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(arrays))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("a.w".into(), Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 3.25, 0.0, 7.0]).unwrap());
        m.insert("b".into(), Tensor::scalar(1.5));
        m
    }

    #[test]
    fn round_trip() {
        let m = sample();
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn bad_magic_reported_at_zero() {
        let mut b = encode(&sample());
        b[0] = b'X';
        match decode(&b) {
            Err(AutodiffError::Checkpoint { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_reported() {
        let b = encode(&sample());
        let err = decode(&b[..b.len() - 2]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
