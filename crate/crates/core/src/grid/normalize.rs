use serde::{Deserialize, Serialize};

use super::{Field2D, Units};
use crate::error::{Error, Result};

/// Drizzle threshold in mm/h below which intensities are treated as dry.
pub const DEFAULT_DRIZZLE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    /// mm/h
    pub drizzle_threshold: f64,
    /// Global maximum of `log(1 + x)` over the training set.
    pub log_scale: f64,
}

impl NormalizationSpec {
    pub fn new(drizzle_threshold: f64, log_scale: f64) -> Result<Self> {
        let spec = Self {
            drizzle_threshold,
            log_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.drizzle_threshold.is_finite() && self.drizzle_threshold >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "drizzle threshold must be >= 0, got {}",
                self.drizzle_threshold
            )));
        }
        if !(self.log_scale.is_finite() && self.log_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "log scale must be > 0, got {}",
                self.log_scale
            )));
        }
        Ok(())
    }

    /// Fit `log_scale` to the largest `log(1 + x)` seen in `fields`.
    pub fn fit<'a>(
        drizzle_threshold: f64,
        fields: impl IntoIterator<Item = &'a Field2D>,
    ) -> Result<Self> {
        let max = fields
            .into_iter()
            .map(|f| f.max())
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || max <= drizzle_threshold {
            return Err(Error::Empty("no wet pixels to fit the log scale"));
        }
        Self::new(drizzle_threshold, max.ln_1p())
    }

    /// Map a physical intensity to normalized units.
    pub fn forward(&self, p: f64) -> f64 {
        if p < self.drizzle_threshold {
            0.0
        } else {
            p.ln_1p() / self.log_scale
        }
    }

    /// Map a normalized value back to mm/h, re-applying the drizzle mask.
    pub fn inverse(&self, q: f64) -> f64 {
        let p = (self.log_scale * q).exp_m1();
        if p < self.drizzle_threshold {
            0.0
        } else {
            p
        }
    }
}

pub fn normalize(field: &Field2D, spec: &NormalizationSpec) -> Result<Field2D> {
    spec.validate()?;
    if field.units() != Units::Physical {
        return Err(Error::InvalidArgument(
            "normalize expects a physical-unit field".into(),
        ));
    }
    Ok(field.map(|p| spec.forward(p))?.with_units(Units::Normalized))
}

pub fn denormalize(field: &Field2D, spec: &NormalizationSpec) -> Result<Field2D> {
    spec.validate()?;
    if field.units() != Units::Normalized {
        return Err(Error::InvalidArgument(
            "denormalize expects a normalized field".into(),
        ));
    }
    Ok(field.map(|q| spec.inverse(q))?.with_units(Units::Physical))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(p: f64, units: Units) -> Field2D {
        Field2D::new(1, 1, 2.0, vec![p], units).unwrap()
    }

    #[test]
    fn drizzle_is_zeroed() {
        let spec = NormalizationSpec::new(0.1, 3.0).unwrap();
        assert_eq!(normalize(&one(0.05, Units::Physical), &spec).unwrap().get(0, 0), 0.0);
        assert_eq!(normalize(&one(0.0, Units::Physical), &spec).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn log_linear_value() {
        let spec = NormalizationSpec::new(0.1, 2.0).unwrap();
        let e1 = std::f64::consts::E - 1.0;
        let n = normalize(&one(e1, Units::Physical), &spec).unwrap();
        assert!((n.get(0, 0) - 0.5).abs() < 1e-15);
        assert_eq!(n.units(), Units::Normalized);
        let d = denormalize(&one(0.5, Units::Normalized), &spec).unwrap();
        assert!((d.get(0, 0) - e1).abs() < 1e-12);
        assert_eq!(denormalize(&one(0.0, Units::Normalized), &spec).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn wrong_units_rejected() {
        let spec = NormalizationSpec::new(0.1, 2.0).unwrap();
        assert!(normalize(&one(1.0, Units::Normalized), &spec).is_err());
        assert!(denormalize(&one(1.0, Units::Physical), &spec).is_err());
        assert!(NormalizationSpec::new(-1.0, 2.0).is_err());
        assert!(NormalizationSpec::new(0.1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_above_drizzle(vals in prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..200.0], 16)) {
            let spec = NormalizationSpec::new(0.1, 201f64.ln()).unwrap();
            let f = Field2D::new(4, 4, 2.0, vals.clone(), Units::Physical).unwrap();
            let back = denormalize(&normalize(&f, &spec).unwrap(), &spec).unwrap();
            for (a, b) in vals.iter().zip(back.values()) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300));
            }
        }

        #[test]
        fn monotone_above_drizzle(a in 0.1f64..500.0, b in 0.1f64..500.0) {
            let spec = NormalizationSpec::new(0.1, 7.0).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(spec.forward(lo) <= spec.forward(hi));
        }
    }
}
