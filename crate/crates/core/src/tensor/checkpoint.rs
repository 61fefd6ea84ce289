//! Binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `SVDCKPT1`, then per parameter a `u64` LE name
//! length, the UTF-8 name, a `u64` LE rank, `rank` `u64` LE dims and the raw
//! `f64` LE data. The file ends after the last parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Result, SvdcError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SVDCKPT1";

pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in params {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
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

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(SvdcError::Format("bad checkpoint magic".into()));
    }
    let mut out = Vec::new();
    loop {
        let mut b = [0u8; 8];
        match r.read_exact(&mut b) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(b) as usize;
        if name_len > 1 << 16 {
            return Err(SvdcError::Format(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| SvdcError::Format(e.to_string()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(SvdcError::Format(format!("implausible rank {rank} for {name}")));
        }
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint<'a>(
    path: impl AsRef<Path>,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -3.25, 0.1]).unwrap();
        let b = Tensor::scalar(std::f64::consts::PI);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("a", &a), ("enc.w", &b)]).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        assert_eq!(back[1].0, "enc.w");
        for ((_, x), y) in back.iter().zip([&a, &b]) {
            assert_eq!(x.shape(), y.shape());
            let bits: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, want);
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &t)]).unwrap();
        // magic, name len, name, rank, dim, data
        assert_eq!(buf.len(), 8 + 8 + 1 + 8 + 8 + 16);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1);
        assert_eq!(buf[16], b'w');
        assert_eq!(u64::from_le_bytes(buf[17..25].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[25..33].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[33..41].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOTACKPT"[..]).is_err());
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
