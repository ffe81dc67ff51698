//! Named-tensor checkpoint files.
//!
//! Layout (little-endian): magic `MGWT`, version `u32`, then until EOF a
//! sequence of records `name_len u32 | name (UTF-8) | rank u32 |
//! extents u32[rank] | payload f64[numel]`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MGWT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(TensorError::Format("bad magic, expected MGWT".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < buf.len() {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| TensorError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| TensorError::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, entries)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(std::fs::File::open(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Format(format!(
                "truncated checkpoint at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &[("w".to_string(), t)]).unwrap();
        assert_eq!(&bytes[..4], b"MGWT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], b'w');
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 4 + 4 + 4 + 1 + 4 + 8 + 16);
        assert_eq!(&bytes[bytes.len() - 8..], &(-2.0f64).to_le_bytes());
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        assert!(read_checkpoint(&b"XXXX\x01\0\0\0"[..]).is_err());
        let t = Tensor::ones(&[3]);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &[("a".into(), t)]).unwrap();
        bytes.pop();
        assert!(matches!(read_checkpoint(&bytes[..]), Err(TensorError::Format(_))));
    }
}
