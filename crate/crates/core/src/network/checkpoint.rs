//! Binary checkpoint format.
//!
//! Layout, all integers little-endian `u32`:
//! magic `SEPK1\0`, tensor count, then per tensor the name length, UTF-8
//! name, rank, dims and an `f32` payload in row-major order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::Parameters;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"SEPK1\0";

pub fn to_bytes(params: &Parameters) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Parameters> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = r.u32()?;
    let mut params = Parameters::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if params.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(params)
}

/// Writes through a temporary file so a crash never leaves a partial checkpoint.
pub fn save(path: &Path, params: &Parameters) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, to_bytes(params))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Parameters> {
    let buf = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&buf)
}

/// Hex SHA-256 of the serialized parameters.
pub fn digest(params: &Parameters) -> String {
    hex::encode(Sha256::digest(to_bytes(params)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Parameters {
        let mut p = Parameters::new();
        p.insert("a.w", Tensor::new(vec![2, 1, 3], vec![0.5, -1.25, 3.0, 1e-3, 7.0, -0.0]).unwrap());
        p.insert("ema.a.w", Tensor::vector(vec![1.0 / 3.0]));
        p.insert("step", Tensor::scalar(12.0));
        p.round_to_f32();
        p
    }

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let p = sample();
        let q = from_bytes(&to_bytes(&p)).unwrap();
        assert_eq!(p, q);
        assert_eq!(to_bytes(&q), to_bytes(&p));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&path, &sample()).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
        assert_eq!(digest(&sample()).len(), 64);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&sample());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(Error::Checkpoint(_))));
    }
}
