//! Closed-form differentiable relaxation of area, perimeter and Euler
//! characteristic on an autodiff [`Tape`].
//!
//! The pipeline for one field is
//! `x -> opening (optional) -> P = sigmoid((x - u) / tau) * mask -> [A, P, symlog(chi)]`.
//! Perimeter is the anisotropic total variation of `P` over in-grid neighbour
//! pairs. The Euler characteristic uses the complex whose vertices are pixels,
//! edges are 4-adjacent pairs and faces are 2x2 blocks, with `min` as the
//! fuzzy conjunction, so binary inputs reproduce
//! [`crate::geometry::euler_characteristic_exact`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::NormalizationSpec;

/// Threshold temperature in normalized units.
pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_TAU_MASK: f64 = 0.02;
/// mm/h
pub const DEFAULT_PERSISTENCE_DELTA_MMH: f64 = 0.05;

const OFF_GRID: f64 = 1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Anneal {
    #[default]
    None,
    Geometric { ratio: f64, floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftGeomConfig {
    pub tau: f64,
    pub tau_mask: f64,
    /// Persistence floor in normalized units. `None` disables the mask.
    pub persistence_delta: Option<f64>,
    /// Normalized units, ascending.
    pub thresholds: Vec<f64>,
    pub anneal: Anneal,
    pub use_morph_filter: bool,
    /// Physical pixel edge length, km.
    pub pixel_size: f64,
}

impl SoftGeomConfig {
    /// Thresholds and persistence floor given in mm/h, mapped through `norm`.
    ///
    /// The drizzle mask is not applied to the mapping itself: a 0.05 mm/h
    /// floor would otherwise collapse to zero.
    pub fn from_physical(
        norm: &NormalizationSpec,
        thresholds_mmh: &[f64],
        delta_mmh: f64,
        pixel_size: f64,
    ) -> Result<Self> {
        let map = |p: f64| p.ln_1p() / norm.log_scale;
        let cfg = Self {
            tau: DEFAULT_TAU,
            tau_mask: DEFAULT_TAU_MASK,
            persistence_delta: Some(map(delta_mmh)),
            thresholds: thresholds_mmh.iter().map(|&t| map(t)).collect(),
            anneal: Anneal::None,
            use_morph_filter: true,
            pixel_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Bare configuration: no filter, no mask.
    pub fn plain(thresholds: Vec<f64>, tau: f64, pixel_size: f64) -> Result<Self> {
        let cfg = Self {
            tau,
            tau_mask: DEFAULT_TAU_MASK,
            persistence_delta: None,
            thresholds,
            anneal: Anneal::None,
            use_morph_filter: false,
            pixel_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.tau_mask > 0.0 && self.tau_mask.is_finite()) {
            return bad(format!("tau_mask must be > 0, got {}", self.tau_mask));
        }
        if let Some(d) = self.persistence_delta {
            if !(d >= 0.0 && d.is_finite()) {
                return bad(format!("persistence delta must be >= 0, got {d}"));
            }
        }
        if self.thresholds.is_empty() {
            return bad("at least one threshold is required".into());
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1])
            || self.thresholds.iter().any(|t| !t.is_finite())
        {
            return bad("thresholds must be finite and strictly ascending".into());
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return bad(format!("pixel size must be > 0, got {}", self.pixel_size));
        }
        if let Anneal::Geometric { ratio, floor } = self.anneal {
            if !(ratio > 0.0 && ratio <= 1.0) || !(floor > 0.0) {
                return bad(format!("bad anneal schedule ratio={ratio} floor={floor}"));
            }
        }
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.thresholds.len()
    }
}

/// `tau(e) = max(floor, tau0 * ratio^e)`.
pub fn anneal_tau(cfg: &SoftGeomConfig, epoch: u32) -> f64 {
    match cfg.anneal {
        Anneal::None => cfg.tau,
        Anneal::Geometric { ratio, floor } => (cfg.tau * ratio.powi(epoch as i32)).max(floor),
    }
}

fn dims(x: Var) -> Result<(usize, usize)> {
    match x.shape() {
        Shape::Grid(h, w) => Ok((h, w)),
        s => Err(Error::ShapeMismatch {
            op: "analytic",
            left: s.to_string(),
            right: "grid".into(),
        }),
    }
}

/// `sigmoid((x - u) / tau)`.
pub fn soft_indicator(t: &mut Tape, x: Var, u: f64, tau: f64) -> Result<Var> {
    dims(x)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let shifted = t.add_const(x, -u);
    let z = t.scale(shifted, 1.0 / tau);
    Ok(t.sigmoid(z))
}

pub fn soft_area(t: &mut Tape, p: Var, pixel_size: f64) -> Result<Var> {
    dims(p)?;
    let s = t.sum(p);
    Ok(t.scale(s, pixel_size * pixel_size))
}

/// Constant grid that is 1 where the shifted source exists and 0 elsewhere.
fn valid_mask(h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut m = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r as isize - dy, c as isize - dx);
            if sr >= 0 && sr < h as isize && sc >= 0 && sc < w as isize {
                m[r * w + c] = 1.0;
            }
        }
    }
    m
}

/// Sum of absolute differences over in-grid 4-neighbour pairs, times `scale`.
fn tv_kernel(t: &mut Tape, x: Var, scale: f64) -> Result<Var> {
    let (h, w) = dims(x)?;
    let mut parts = Vec::with_capacity(2);
    for (dy, dx) in [(0, 1), (1, 0)] {
        let nb = t.shift(x, dy, dx)?;
        let d = t.sub(x, nb)?;
        let m = t.constant(valid_mask(h, w, dy, dx), Shape::Grid(h, w))?;
        let d = t.mul(d, m)?;
        let a = t.abs(d);
        parts.push(t.sum(a));
    }
    let s = t.add(parts[0], parts[1])?;
    Ok(t.scale(s, scale))
}

pub fn soft_perimeter(t: &mut Tape, p: Var, pixel_size: f64) -> Result<Var> {
    tv_kernel(t, p, pixel_size)
}

/// Anisotropic total variation over in-grid neighbour pairs.
pub fn tv_norm(t: &mut Tape, x: Var) -> Result<Var> {
    tv_kernel(t, x, 1.0)
}

/// `sum P - sum min(horizontal pairs) - sum min(vertical pairs) + sum min(2x2)`,
/// with `P` zero outside the grid. Expects `P >= 0`.
pub fn soft_euler(t: &mut Tape, p: Var) -> Result<Var> {
    dims(p)?;
    let left = t.shift(p, 0, 1)?;
    let up = t.shift(p, 1, 0)?;
    let diag = t.shift(p, 1, 1)?;
    let eh = t.min2(p, left)?;
    let ev = t.min2(p, up)?;
    let top = t.min2(up, diag)?;
    let face = t.min2(eh, top)?;
    let v = t.sum(p);
    let eh = t.sum(eh);
    let ev = t.sum(ev);
    let f = t.sum(face);
    let a = t.sub(v, eh)?;
    let b = t.sub(a, ev)?;
    t.add(b, f)
}

fn neighbourhood_reduce(t: &mut Tape, x: Var, take_min: bool) -> Result<Var> {
    let (h, w) = dims(x)?;
    let mut acc = x;
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            if dy == 0 && dx == 0 {
                continue;
            }
            let nb = t.shift(x, dy, dx)?;
            let fill = if take_min { OFF_GRID } else { -OFF_GRID };
            let pad: Vec<f64> = valid_mask(h, w, dy, dx)
                .into_iter()
                .map(|m| if m == 0.0 { fill } else { 0.0 })
                .collect();
            let pad = t.constant(pad, Shape::Grid(h, w))?;
            let nb = t.add(nb, pad)?;
            acc = if take_min { t.min2(acc, nb)? } else { t.max2(acc, nb)? };
        }
    }
    Ok(acc)
}

/// 3x3 minimum over in-grid neighbours.
pub fn erode3(t: &mut Tape, x: Var) -> Result<Var> {
    neighbourhood_reduce(t, x, true)
}

/// 3x3 maximum over in-grid neighbours.
pub fn dilate3(t: &mut Tape, x: Var) -> Result<Var> {
    neighbourhood_reduce(t, x, false)
}

/// Opening: erosion then dilation, 3x3 stencil.
pub fn morph_prefilter(t: &mut Tape, x: Var) -> Result<Var> {
    let e = erode3(t, x)?;
    dilate3(t, e)
}

/// `sigmoid((maxpool3(x) - delta) / tau_mask)`.
pub fn persistence_mask(t: &mut Tape, x: Var, delta: f64, tau_mask: f64) -> Result<Var> {
    if !(delta >= 0.0) || !(tau_mask > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need delta >= 0 and tau_mask > 0, got {delta}, {tau_mask}"
        )));
    }
    let mp = dilate3(t, x)?;
    soft_indicator(t, mp, delta, tau_mask)
}

/// `[A, P, symlog(chi)]` per threshold, concatenated into a `3N` vector.
pub fn gamma_soft(t: &mut Tape, x: Var, cfg: &SoftGeomConfig) -> Result<Var> {
    gamma_soft_at(t, x, cfg, cfg.tau)
}

/// [`gamma_soft`] with an explicit temperature, e.g. from [`anneal_tau`].
pub fn gamma_soft_at(t: &mut Tape, x: Var, cfg: &SoftGeomConfig, tau: f64) -> Result<Var> {
    cfg.validate()?;
    dims(x)?;
    let x = if cfg.use_morph_filter {
        morph_prefilter(t, x)?
    } else {
        x
    };
    let mask = match cfg.persistence_delta {
        Some(d) => Some(persistence_mask(t, x, d, cfg.tau_mask)?),
        None => None,
    };
    let mut parts = Vec::with_capacity(3 * cfg.n_levels());
    for &u in &cfg.thresholds {
        let mut p = soft_indicator(t, x, u, tau)?;
        if let Some(m) = mask {
            p = t.mul(p, m)?;
        }
        parts.push(soft_area(t, p, cfg.pixel_size)?);
        parts.push(soft_perimeter(t, p, cfg.pixel_size)?);
        let chi = soft_euler(t, p)?;
        parts.push(t.symlog(chi));
    }
    t.concat(&parts)
}

/// Log-space features of a soft gamma: `log1p` on the area and perimeter
/// channels, the already symlog-scaled Euler channel passed through.
pub fn soft_log_features(t: &mut Tape, gamma: Var) -> Result<Var> {
    let n = match gamma.shape() {
        Shape::Vector(n) if n % 3 == 0 => n,
        s => {
            return Err(Error::ShapeMismatch {
                op: "soft_log_features",
                left: s.to_string(),
                right: "vector(3N)".into(),
            })
        }
    };
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let c = t.slice(gamma, i, 1)?;
        parts.push(if i % 3 == 2 { c } else { t.log1p(c)? });
    }
    t.concat(&parts)
}

/// Weighted L1 between [`soft_log_features`] of `gamma` and `log1p(target)`.
pub fn analytic_loss(
    t: &mut Tape,
    gamma: Var,
    target: &[f64],
    weights: [f64; 3],
) -> Result<Var> {
    let f = soft_log_features(t, gamma)?;
    if f.shape() != Shape::Vector(target.len()) {
        return Err(Error::ShapeMismatch {
            op: "analytic_loss",
            left: f.shape().to_string(),
            right: format!("vector({})", target.len()),
        });
    }
    let tv: Vec<f64> = target.iter().map(|v| v.ln_1p()).collect();
    let w: Vec<f64> = (0..target.len()).map(|i| weights[i % 3]).collect();
    let tv = t.constant(tv, f.shape())?;
    let w = t.constant(w, f.shape())?;
    let d = t.sub(f, tv)?;
    let a = t.abs(d);
    let wa = t.mul(a, w)?;
    Ok(t.sum(wa))
}
