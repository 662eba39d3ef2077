//! Flat binary tensor format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SASF" | version: u32 | rank: u32 | dims: rank x u64 | dtype: u8 | payload
//! ```
//!
//! `dtype` is 0 for `f32` and 1 for `f64`; the payload is the row-major data.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SASF";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[dtype as u8])?;
    match dtype {
        DType::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated tensor stream".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

/// Reads one tensor; `f32` payloads are widened to `f64`.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Tensor, DType)> {
    let magic: [u8; 4] = read_array(r)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"SASF\"")));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor format version {version}")));
    }
    let rank = u32::from_le_bytes(read_array(r)?) as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_array(r)?);
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    let dtype = match read_array::<1, _>(r)?[0] {
        0 => DType::F32,
        1 => DType::F64,
        tag => return Err(Error::Format(format!("unknown dtype tag {tag}"))),
    };
    let mut data = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        data.push(match dtype {
            DType::F32 => f32::from_le_bytes(read_array(r)?) as f64,
            DType::F64 => f64::from_le_bytes(read_array(r)?),
        });
    }
    let t = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((t, dtype))
}

pub fn save(path: impl AsRef<std::path::Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<std::path::Path>) -> Result<Tensor> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(read_tensor(&mut r)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        let mut expected = b"SASF".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.push(1);
        expected.extend(1.5f64.to_le_bytes());
        expected.extend((-2.0f64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_streams() {
        assert!(matches!(read_tensor(&mut &b"NOPE"[..]), Err(Error::Format(_))));
        let t = Tensor::ones(&[3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F32).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F32).unwrap();
        buf[4 + 4 + 4 + 8] = 7;
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let t = Tensor::from_fn(&dims, |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0 - 50.0);
            for dtype in [DType::F64, DType::F32] {
                let mut buf = Vec::new();
                write_tensor(&mut buf, &t, dtype).unwrap();
                let (back, tag) = read_tensor(&mut buf.as_slice()).unwrap();
                prop_assert_eq!(tag, dtype);
                prop_assert_eq!(back.shape(), t.shape());
                let tol = if dtype == DType::F64 { 0.0 } else { 1e-4 };
                prop_assert!(back.max_abs_diff(&t).unwrap() <= tol);
            }
        }
    }
}
