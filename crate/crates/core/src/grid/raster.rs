//! Minimal little-endian raster container.
//!
//! ```text
//! 0..8    magic  b"MGF2D\0\0\x01"
//! 8..12   height u32
//! 12..16  width  u32
//! 16..24  pixel_size f64
//! 24      units tag (0 physical, 1 normalized)
//! 25..32  reserved, zero
//! 32..    height * width f32, row-major
//! ```

use std::fs;
use std::path::Path;

use super::{Field2D, Units};
use crate::error::{Error, Result};

pub const RASTER_MAGIC: [u8; 8] = *b"MGF2D\0\0\x01";
const HEADER_LEN: usize = 32;

pub fn encode_raster(field: &Field2D) -> Result<Vec<u8>> {
    let height = u32::try_from(field.height())
        .map_err(|_| Error::InvalidField("height exceeds u32".into()))?;
    let width = u32::try_from(field.width())
        .map_err(|_| Error::InvalidField("width exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * field.len());
    out.extend_from_slice(&RASTER_MAGIC);
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&field.pixel_size().to_le_bytes());
    out.push(field.units().tag());
    out.extend_from_slice(&[0u8; 7]);
    for &v in field.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raster(bytes: &[u8], path: &Path) -> Result<Field2D> {
    let truncated = |expected: u64| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len() as u64,
    };
    if bytes.len() < RASTER_MAGIC.len() || bytes[..8] != RASTER_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN as u64));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let height = u32_at(8);
    let width = u32_at(12);
    let pixel_size = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let units = Units::from_tag(bytes[24])
        .ok_or_else(|| Error::InvalidField(format!("unknown units tag {}", bytes[24])))?;

    let payload = (height as u64)
        .checked_mul(width as u64)
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| usize::try_from(n + HEADER_LEN as u64).is_ok())
        .ok_or(Error::DimensionOverflow { height, width })?;
    let expected = HEADER_LEN as u64 + payload;
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected));
    }
    let values = bytes[HEADER_LEN..expected as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Field2D::new(height as usize, width as usize, pixel_size, values, units)
}

pub fn write_raster(field: &Field2D, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_raster(field)?)?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Field2D> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_raster(&bytes, path)
}
