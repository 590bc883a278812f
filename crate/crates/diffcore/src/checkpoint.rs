//! Binary checkpoint format.
//!
//! ```text
//! "MMGC" u32:version=1
//! repeated { u32 name_len, name utf-8, u32 rank, u32 dims[rank], f32 data[prod(dims)] }
//! u64 record_count
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMGC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<'a, W, I>(mut w: W, records: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let mut count: u64 = 0;
    for (name, t) in records {
        w.write_all(&u32_len(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_len(t.shape().len())?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&u32_len(d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        count += 1;
    }
    w.write_all(&count.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(DiffError::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DiffError::Format(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while bytes.len() - cur.pos > 8 {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| DiffError::Format(format!("record name: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| DiffError::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push((name, Tensor::new(dims, data)?));
    }
    let count = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
    if count != records.len() as u64 {
        return Err(DiffError::Format(format!(
            "trailer says {count} records, found {}",
            records.len()
        )));
    }
    Ok(records)
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| DiffError::Format(format!("{n} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DiffError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("ab", &t)]).unwrap();
        let mut expected = b"MMGC".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::zeros(&[3, 2]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &t)]).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let n = bad.len();
        let mut wrong_count = buf.clone();
        wrong_count[n - 8] = 5;
        assert!(read_checkpoint(wrong_count.as_slice()).is_err());
    }
}
