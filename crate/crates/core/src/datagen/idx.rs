//! Reader for the big-endian IDX format used by the MNIST distribution files.

use super::DataError;
use ndarray::Array3;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale images scaled to `[0, 1]`, shaped `(count, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub pixels: Array3<f64>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first `n` images (all of them when fewer).
    pub fn head(&self, n: usize) -> IdxImages {
        let n = n.min(self.len());
        IdxImages { pixels: self.pixels.slice(ndarray::s![..n, .., ..]).to_owned() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    Images(IdxImages),
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { expected: offset + 4, got: bytes.len() })
}

fn check_len(bytes: &[u8], header: usize, payload: usize) -> Result<(), DataError> {
    let expected = header
        .checked_add(payload)
        .ok_or_else(|| DataError::Format("declared dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(DataError::Truncated { expected, got: bytes.len() });
    }
    Ok(())
}

/// Parses an unsigned-byte IDX payload (3-d images or 1-d labels).
///
/// The payload length must match the declared dimensions exactly.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, DataError> {
    let magic = read_u32(bytes, 0)?;
    match magic {
        IDX_LABELS_MAGIC => {
            let n = read_u32(bytes, 4)? as usize;
            check_len(bytes, 8, n)?;
            Ok(IdxData::Labels(bytes[8..].to_vec()))
        }
        IDX_IMAGES_MAGIC => {
            let n = read_u32(bytes, 4)? as usize;
            let rows = read_u32(bytes, 8)? as usize;
            let cols = read_u32(bytes, 12)? as usize;
            let total = n
                .checked_mul(rows)
                .and_then(|v| v.checked_mul(cols))
                .ok_or_else(|| DataError::Format("declared dimensions overflow".into()))?;
            check_len(bytes, 16, total)?;
            let pixels = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
            let pixels = Array3::from_shape_vec((n, rows, cols), pixels).expect("length checked");
            Ok(IdxData::Images(IdxImages { pixels }))
        }
        other => Err(DataError::Format(format!(
            "unsupported magic 0x{other:08x} (expected 0x{IDX_IMAGES_MAGIC:08x} or 0x{IDX_LABELS_MAGIC:08x})"
        ))),
    }
}
