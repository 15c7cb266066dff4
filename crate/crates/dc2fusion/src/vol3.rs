//! VOL3 volume files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VOL3"
//! 4       1     version (1)
//! 5       12    extents X, Y, Z as u32 little-endian
//! 17      1     dtype (0 = f32 little-endian)
//! 18      4XYZ  voxels, x fastest, then y, then z
//! ```
//!
//! In memory a volume is a `[1, X, Y, Z]` tensor with z fastest; the codec
//! transposes between the two orders.

use std::fs;
use std::path::Path;

use dc2fusion_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VOL3";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 18;

fn extents(volume: &Tensor<f32>) -> Result<[usize; 3]> {
    match *volume.shape() {
        [1, x, y, z] | [x, y, z] => Ok([x, y, z]),
        ref s => Err(Error::ShapeMismatch(format!(
            "single-channel volume expected, got {s:?}"
        ))),
    }
}

pub fn encode(volume: &Tensor<f32>) -> Result<Vec<u8>> {
    let [x, y, z] = extents(volume)?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for e in [x, y, z] {
        let e = u32::try_from(e).map_err(|_| Error::ShapeMismatch(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.push(DTYPE_F32);
    let d = volume.data();
    for k in 0..z {
        for j in 0..y {
            for i in 0..x {
                out.extend_from_slice(&d[(i * y + j) * z + k].to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses a file image; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "VOL3",
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::Unsupported {
            path: path.into(),
            what: "version",
            value: bytes[4].into(),
        });
    }
    let ext = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (x, y, z) = (ext(0), ext(1), ext(2));
    if bytes[17] != DTYPE_F32 {
        return Err(Error::Unsupported {
            path: path.into(),
            what: "dtype",
            value: bytes[17].into(),
        });
    }
    if x == 0 || y == 0 || z == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}: empty extent {x}x{y}x{z}",
            path.display()
        )));
    }
    let expected = 4 * x as u64 * y as u64 * z as u64;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::TrailingBytes {
            path: path.into(),
            extra: found - expected,
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let mut data = vec![0f32; x * y * z];
    for (p, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                path: path.into(),
                index: p,
            });
        }
        let (i, j, k) = (p % x, (p / x) % y, p / (x * y));
        data[(i * y + j) * z + k] = v;
    }
    Ok(Tensor::new(&[1, x, y, z], data)?)
}

pub fn save_volume(path: &Path, volume: &Tensor<f32>) -> Result<()> {
    let bytes = encode(volume)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
