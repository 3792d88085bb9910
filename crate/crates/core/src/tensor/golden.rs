//! Golden tensor files.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "TNSR" | version: u32 = 1 | dtype: u8 (0 = f32, 1 = f64) | rank: u32 |
//! extents: rank × u32 | payload: row-major values
//! ```

use std::fs;
use std::path::Path;

use super::{DType, Float, Tensor};
use crate::error::{Error, Result};

pub const GOLDEN_MAGIC: &[u8; 4] = b"TNSR";
pub const GOLDEN_VERSION: u32 = 1;

/// Serialize `t` into `out`.
pub fn write_golden_to<T: Float>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(GOLDEN_MAGIC);
    out.extend_from_slice(&GOLDEN_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    T::to_le_bytes_vec(t.data(), out);
}

/// Parse one tensor from the front of `bytes`; returns it with the number of
/// bytes consumed.
pub fn read_golden_from<T: Float>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != GOLDEN_MAGIC {
        return Err(Error::Format("bad golden magic, expected \"TNSR\"".into()));
    }
    let version = cur.u32()?;
    if version != GOLDEN_VERSION {
        return Err(Error::Format(format!(
            "unsupported golden version {version}"
        )));
    }
    let code = cur.take(1)?[0];
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {dtype:?}, requested {:?}",
            T::DTYPE
        )));
    }
    let rank = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = cur.take(numel * dtype.size())?;
    let data = payload
        .chunks_exact(dtype.size())
        .map(T::from_le_slice)
        .collect();
    Ok((Tensor::new(&shape, data)?, cur.pos))
}

pub fn write_golden<T: Float>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_golden_to(t, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_golden<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = read_golden_from(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor",
            bytes.len() - used
        )));
    }
    Ok(t)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated golden tensor".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_golden_to(&t, &mut buf);
        let mut expected = b"TNSR".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0]); // version
        expected.push(0); // f32
        expected.extend_from_slice(&[1, 0, 0, 0]); // rank
        expected.extend_from_slice(&[2, 0, 0, 0]); // extent
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_input() {
        let t = Tensor::<f64>::zeros(&[1, 2, 3]);
        let mut buf = Vec::new();
        write_golden_to(&t, &mut buf);
        assert!(
            read_golden_from::<f32>(&buf).is_err(),
            "dtype mismatch must fail"
        );
        assert!(
            read_golden_from::<f64>(&buf[..buf.len() - 1]).is_err(),
            "truncation must fail"
        );
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_golden_from::<f64>(&bad).is_err());
        let (back, used) = read_golden_from::<f64>(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back, t);
    }
}
