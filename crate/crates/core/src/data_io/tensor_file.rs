//! LSGT tensor container.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "LSGT"
//! 4       4         format version, u32 LE (= 1)
//! 8       1         dtype code (0 = f32)
//! 9       1         rank
//! 10      8·rank    extents, u64 LE each
//! ...     4·numel   payload, f32 LE, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LSGT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn header_len(rank: usize) -> usize {
    4 + 4 + 1 + 1 + 8 * rank
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(t.rank()) + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(u8::try_from(t.rank()).expect("rank fits in u8"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take(bytes: &[u8], at: usize, n: usize, expected_total: usize) -> Result<&[u8]> {
    bytes.get(at..at + n).ok_or(Error::Truncated {
        expected: expected_total.max(at + n),
        found: bytes.len(),
    })
}

/// Decodes one tensor from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let magic: [u8; 4] = take(bytes, 0, 4, 10)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, 10)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = take(bytes, 8, 1, 10)?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let rank = take(bytes, 9, 1, 10)?[0] as usize;
    let hlen = header_len(rank);
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let raw = u64::from_le_bytes(take(bytes, 10 + 8 * i, 8, hlen)?.try_into().unwrap());
        let d = usize::try_from(raw)
            .map_err(|_| Error::InvalidHeader(format!("extent {raw} too large")))?;
        if d == 0 {
            return Err(Error::InvalidHeader(format!("zero extent at axis {i}")));
        }
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::InvalidHeader(format!("shape {shape:?} overflows")))?;
    let total = hlen + numel;
    let payload = take(bytes, hlen, numel, total)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(shape, data)?, total))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::InvalidHeader(format!(
            "{} trailing bytes after payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}
