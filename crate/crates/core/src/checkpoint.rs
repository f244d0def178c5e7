//! SLV1 tensor container.
//!
//! ```text
//! magic   4 bytes  "SLV1"
//! count   u64 LE   number of tensor records
//! record  (repeated `count` times)
//!   name_len  u32 LE
//!   name      name_len bytes of UTF-8
//!   rank      u32 LE
//!   dims      rank x u64 LE
//!   payload   prod(dims) x f64 LE (IEEE-754 bits, row-major)
//! ```
//!
//! Records are written in ascending name order. Nothing follows the last record.

use std::path::Path;

use crate::error::{Result, SlvError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SLV1";

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SlvError::Format(format!(
                "truncated while reading {what} at byte {} (need {n}, have {})",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(SlvError::Format(format!("bad magic {magic:?}, expected \"SLV1\"")));
    }
    let count = r.u64("record count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| SlvError::Format(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| SlvError::Format("oversized tensor".into()))?, &name)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| SlvError::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(SlvError::Format(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| SlvError::io(parent, e))?;
    }
    std::fs::write(path, encode(tensors)).map_err(|e| SlvError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| SlvError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        SlvError::Format(m) => SlvError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a".to_string(), Tensor::new(vec![2], vec![1.5, -0.0]).unwrap()),
            (
                "b.c".to_string(),
                Tensor::new(vec![1, 3], vec![f64::MIN_POSITIVE, 1e300, 3.0]).unwrap(),
            ),
        ]
    }

    #[test]
    fn byte_layout() {
        let bytes = encode(&sample()[..1]);
        let mut expected = b"SLV1".to_vec();
        expected.extend(1u64.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"a");
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.5f64.to_le_bytes());
        expected.extend((-0.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let back = decode(&encode(&sample())).unwrap();
        for ((n1, t1), (n2, t2)) in sample().iter().zip(&back) {
            assert_eq!(n1, n2);
            assert!(t1.bits_eq(t2));
        }
    }

    #[test]
    fn corrupt_magic_and_truncation_are_rejected() {
        let mut bytes = encode(&sample());
        let trunc = decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(trunc.contains("truncated"), "{trunc}");
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(SlvError::Format(m)) if m.contains("magic")));
    }
}
