//! Little-endian binary container for named `f32` tensors.
//!
//! ```text
//! magic    8 bytes   b"PMRTNSR\0"
//! version  u32       1
//! count    u32       number of tensors
//! per tensor, in order:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, extents (rank x u64)
//!   values   product(extents) x f32
//! ```
//!
//! Nothing may follow the last tensor.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"PMRTNSR\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.total_elements() * 4 + params.len() * 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
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
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::contract(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::contract("not a tensor container (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::contract(format!(
            "unsupported container version {version}"
        )));
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::contract(format!("tensor {i} name is not UTF-8")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = numel(&shape);
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::contract("tensor extents overflow"))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.position(&name).is_some() {
            return Err(Error::contract(format!("duplicate tensor `{name}`")));
        }
        params.insert(&name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::contract(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn layout_of_a_single_tensor() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let b = encode(&p);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(b[20], b'w');
        assert_eq!(&b[21..25], &1u32.to_le_bytes());
        assert_eq!(&b[25..33], &2u64.to_le_bytes());
        assert_eq!(&b[33..37], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 41);
        assert_eq!(decode(&b).unwrap(), p);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = encode(&p);
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut ver = b;
        ver[8] = 9;
        assert!(decode(&ver).is_err());
    }
}
