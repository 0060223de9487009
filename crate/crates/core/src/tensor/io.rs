//! Little-endian weight container.
//!
//! ```text
//! "FAVT" | version: u32 | count: u32
//! per tensor: name_len: u32 | name (UTF-8) | rank: u32 | extents: u64 * rank | f64 * numel
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FAVT";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_to<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let count =
        u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let len = u32::try_from(name.len()).map_err(|_| Error::Format("name too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_from<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn save<'a>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    write_to(BufWriter::new(File::create(path)?), tensors)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::new(&[1, 2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, [("ab", &t)]).unwrap();
        assert_eq!(&buf[..4], b"FAVT");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..12], &[1, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[2, 0, 0, 0]);
        assert_eq!(&buf[16..18], b"ab");
        assert_eq!(&buf[18..22], &[2, 0, 0, 0]);
        assert_eq!(&buf[22..30], &1u64.to_le_bytes());
        assert_eq!(&buf[30..38], &2u64.to_le_bytes());
        assert_eq!(&buf[38..46], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 54);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_from(&b"FAVX\x01\0\0\0\0\0\0\0"[..]).is_err());
        let t = Tensor::scalar(3.0);
        let mut buf = Vec::new();
        write_to(&mut buf, [("x", &t)]).unwrap();
        assert!(read_from(&buf[..buf.len() - 1]).is_err());
        assert_eq!(read_from(&buf[..]).unwrap()[0].1, t);
    }
}
