//! `STG1` parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"STG1"
//! u32                  number of arrays
//! repeated per array:  u32 ndim, ndim x u64 dims, prod(dims) x f64
//! ```
//!
//! Array 0 is the architecture record `[h, w, K, V, hidden, token_dim,
//! pos_dim]`; arrays 1.. are the parameter tensors in `PARAM_NAMES` order.

use std::fs;
use std::path::Path;

use crate::codebook::GridShape;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::model::{PolicyDims, PolicyParams};

pub const MAGIC: &[u8; 4] = b"STG1";

pub fn encode(params: &PolicyParams) -> Vec<u8> {
    let d = params.dims();
    let meta = Tensor::vector(
        [d.grid.h, d.grid.w, d.categories, d.vocab, d.hidden, d.token_dim, d.pos_dim]
            .iter()
            .map(|&x| x as f64)
            .collect(),
    );
    let arrays: Vec<&Tensor> = std::iter::once(&meta).chain(params.tensors()).collect();
    let mut out = Vec::with_capacity(16 + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
        for &dim in a.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in a.data() {
            out.extend_from_slice(&x.to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("array with {ndim} dims")));
        }
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("array size overflows".into()))?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("array size overflows".into()))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<PolicyParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an STG1 checkpoint".into()));
    }
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::Format("checkpoint has no arrays".into()));
    }
    let meta = r.array()?;
    let m = meta.data();
    if m.len() != 7 || m.iter().any(|&x| x < 0.0 || x.fract() != 0.0) {
        return Err(Error::Format("bad architecture record".into()));
    }
    let u = |i: usize| m[i] as usize;
    let dims = PolicyDims {
        vocab: u(3),
        categories: u(2),
        grid: GridShape::new(u(0), u(1)),
        hidden: u(4),
        token_dim: u(5),
        pos_dim: u(6),
    };
    let tensors = (1..count).map(|_| r.array()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    PolicyParams::from_tensors(dims, tensors)
}

pub fn save(params: &PolicyParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyParams> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = PolicyParams::init(PolicyDims::new(64, 8, GridShape::default()), 11).unwrap();
        let bytes = encode(&p);
        assert_eq!(&bytes[..4], b"STG1");
        let q = decode(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode(&q), bytes);
    }

    #[test]
    fn rejects_garbage() {
        let p = PolicyParams::init(PolicyDims::new(8, 2, GridShape::new(2, 2)), 1).unwrap();
        let bytes = encode(&p);
        assert!(matches!(decode(b"STG0\0\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn file_io() {
        let dir = tempfile::tempdir().unwrap();
        let p = PolicyParams::init(PolicyDims::new(8, 2, GridShape::new(2, 2)), 1).unwrap();
        let path = dir.path().join("p.stg");
        save(&p, &path).unwrap();
        assert_eq!(load(&path).unwrap(), p);
        assert!(matches!(load(&dir.path().join("nope.stg")), Err(Error::Io(_))));
    }
}
