//! Field representation and everything that produces or transforms raw fields:
//! normalization, synthetic generation, mix-up augmentation and raster I/O.

mod normalize;
mod raster;
mod synth;

pub use normalize::{denormalize, normalize, NormalizationSpec, DEFAULT_DRIZZLE_THRESHOLD};
pub use raster::{decode_raster, encode_raster, read_raster, write_raster, RASTER_MAGIC};
pub use synth::{
    block_bilinear_interp, gen_multipeak_gaussian, mixup, mixup_with_lambda, MixupConfig,
    MultipeakConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default pixel side length in km.
pub const DEFAULT_PIXEL_SIZE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    /// Physical intensity, mm/h.
    Physical,
    /// `log(1 + x) / S` after drizzle masking.
    Normalized,
}

impl Units {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Units::Physical => 0,
            Units::Normalized => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Units::Physical),
            1 => Some(Units::Normalized),
            _ => None,
        }
    }
}

/// A rectangular, row-major grid of finite intensities with its pixel size.
///
/// Instances are immutable once built; every transform returns a new field.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    height: usize,
    width: usize,
    pixel_size: f64,
    values: Vec<f64>,
    units: Units,
}

impl Field2D {
    pub fn new(
        height: usize,
        width: usize,
        pixel_size: f64,
        values: Vec<f64>,
        units: Units,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidField(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .ok_or_else(|| Error::InvalidField("dimension overflow".into()))?;
        if values.len() != expected {
            return Err(Error::InvalidField(format!(
                "expected {expected} values for {height}x{width}, got {}",
                values.len()
            )));
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::InvalidField(format!(
                "pixel size must be positive, got {pixel_size}"
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!(
                "non-finite value {} at index {idx}",
                values[idx]
            )));
        }
        Ok(Self {
            height,
            width,
            pixel_size,
            values,
            units,
        })
    }

    pub fn zeros(height: usize, width: usize, pixel_size: f64, units: Units) -> Result<Self> {
        Self::new(height, width, pixel_size, vec![0.0; height * width], units)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        pixel_size: f64,
        units: Units,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, pixel_size, values, units)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    /// Area of one pixel in km².
    pub fn pixel_area(&self) -> f64 {
        self.pixel_size * self.pixel_size
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Same metadata, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, self.pixel_size, values, self.units)
    }

    pub fn with_units(&self, units: Units) -> Self {
        Self {
            units,
            ..self.clone()
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.len());
        for r in 0..self.height {
            for c in (0..self.width).rev() {
                values.push(self.get(r, c));
            }
        }
        Self { values, ..self.clone() }
    }

    pub fn flip_vertical(&self) -> Self {
        let mut values = Vec::with_capacity(self.len());
        for r in (0..self.height).rev() {
            values.extend_from_slice(&self.values[r * self.width..(r + 1) * self.width]);
        }
        Self { values, ..self.clone() }
    }

    /// Rotate 90° counter-clockwise; the result is `width x height`.
    pub fn rotate90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut values = Vec::with_capacity(self.len());
        for r in 0..w {
            for c in 0..h {
                values.push(self.get(c, w - 1 - r));
            }
        }
        Self {
            height: w,
            width: h,
            values,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        assert!(Field2D::new(2, 2, 1.0, vec![0.0, 1.0, f64::NAN, 0.0], Units::Physical).is_err());
        assert!(Field2D::new(2, 2, 1.0, vec![0.0; 3], Units::Physical).is_err());
        assert!(Field2D::new(2, 2, 0.0, vec![0.0; 4], Units::Physical).is_err());
        assert!(Field2D::new(0, 2, 1.0, vec![], Units::Physical).is_err());
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let f = Field2D::from_fn(3, 5, 1.0, Units::Physical, |r, c| (r * 7 + c) as f64).unwrap();
        let g = f.rotate90();
        assert_eq!(g.shape(), (5, 3));
        assert_eq!(g.rotate90().rotate90().rotate90(), f);
        assert_eq!(f.flip_horizontal().flip_horizontal(), f);
        assert_eq!(f.flip_vertical().get(0, 0), f.get(2, 0));
    }
}
