//! HILT binary tensor records.
//!
//! A record is the ASCII magic `HILT`, one dtype byte, one rank byte, `rank`
//! little-endian `u32` extents, then the elements in little-endian order.
//! Records can be concatenated; [`read_hilt`] takes a byte offset and returns
//! the offset just past the record it read.

use std::path::Path;

use super::{DType, Result, Scalar, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"HILT";

/// Appends one record for `t` to `out`.
pub fn write_hilt<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(TensorError::Shape {
            op: "write_hilt",
            msg: format!("rank {} does not fit the header", t.rank()),
        });
    }
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Shape {
            op: "write_hilt",
            msg: format!("extent {d} exceeds u32"),
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(at..at + n).ok_or_else(|| TensorError::Format {
        offset: at,
        msg: format!("truncated {what}: need {n} bytes, {} left", bytes.len().saturating_sub(at)),
    })
}

/// Reads the record starting at `offset`. Elements stored in the other
/// precision are converted. Returns the tensor and the end offset.
pub fn read_hilt<T: Scalar>(bytes: &[u8], offset: usize) -> Result<(Tensor<T>, usize)> {
    let mut at = offset;
    if take(bytes, at, 4, "magic")? != MAGIC {
        return Err(TensorError::Format {
            offset: at,
            msg: "bad magic, expected HILT".into(),
        });
    }
    at += 4;
    let tag = take(bytes, at, 1, "dtype")?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| TensorError::Format {
        offset: at,
        msg: format!("unknown dtype tag {tag}"),
    })?;
    at += 1;
    let rank = take(bytes, at, 1, "rank")?[0] as usize;
    at += 1;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = take(bytes, at, 4, "extent")?;
        shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        at += 4;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| TensorError::Format {
            offset: at,
            msg: format!("shape {shape:?} overflows"),
        })?;
    let body = take(bytes, at, n, "data")?;
    let data: Vec<T> = match dtype {
        DType::F32 => body.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => body.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Ok((Tensor::new(shape, data)?, at + n))
}

pub fn write_hilt_file<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_hilt(t, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a single-record file. Trailing bytes are an error.
pub fn read_hilt_file<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    let (t, end) = read_hilt(&bytes, 0)?;
    if end != bytes.len() {
        return Err(TensorError::Format {
            offset: end,
            msg: format!("{} trailing bytes", bytes.len() - end),
        });
    }
    Ok(t)
}
