use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use super::{Field2D, Units};
use crate::error::{Error, Result};

/// Parameters of the multi-peak Gaussian generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultipeakConfig {
    pub height: usize,
    pub width: usize,
    pub n_peaks: usize,
    /// Peak amplitude range, mm/h.
    pub amp_range: (f64, f64),
    /// Gaussian width range, pixels.
    pub sigma_range: (f64, f64),
    pub pixel_size: f64,
}

impl Default for MultipeakConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            n_peaks: 3,
            amp_range: (0.5, 20.0),
            sigma_range: (1.5, 5.0),
            pixel_size: super::DEFAULT_PIXEL_SIZE,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be a positive interval, got ({lo}, {hi})"
        )));
    }
    Ok(())
}

fn sample_in(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Sum of `n_peaks` isotropic Gaussians with uniformly drawn centers,
/// amplitudes and widths. A pure function of `(seed, cfg)`.
pub fn gen_multipeak_gaussian(seed: u64, cfg: &MultipeakConfig) -> Result<Field2D> {
    if cfg.height < 4 || cfg.width < 4 {
        return Err(Error::InvalidArgument(format!(
            "domain {}x{} is too small (min 4x4)",
            cfg.height, cfg.width
        )));
    }
    if cfg.n_peaks == 0 {
        return Err(Error::InvalidArgument("n_peaks must be >= 1".into()));
    }
    check_range("amp_range", cfg.amp_range)?;
    check_range("sigma_range", cfg.sigma_range)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let peaks: Vec<(f64, f64, f64, f64)> = (0..cfg.n_peaks)
        .map(|_| {
            let cy = rng.random_range(0.0..cfg.height as f64);
            let cx = rng.random_range(0.0..cfg.width as f64);
            let a = sample_in(&mut rng, cfg.amp_range);
            let s = sample_in(&mut rng, cfg.sigma_range);
            (cy, cx, a, s)
        })
        .collect();

    Field2D::from_fn(cfg.height, cfg.width, cfg.pixel_size, Units::Physical, |r, c| {
        // pixel centers sit at integer + 0.5
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        peaks
            .iter()
            .map(|&(cy, cx, a, s)| {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                a * (-d2 / (2.0 * s * s)).exp()
            })
            .sum()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    /// Beta(alpha, alpha) concentration for the mixing weight.
    pub alpha: f64,
    /// Standard deviation of the additive noise on the interpolated partner, mm/h.
    pub noise_sigma: f64,
    /// Block size of the coarsen-then-upsample interpolator.
    pub interp_factor: usize,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            noise_sigma: 0.1,
            interp_factor: 4,
        }
    }
}

/// Block-average by `factor`, then bilinearly upsample back to the input grid.
pub fn block_bilinear_interp(field: &Field2D, factor: usize) -> Result<Field2D> {
    if factor == 0 {
        return Err(Error::InvalidArgument("interp factor must be >= 1".into()));
    }
    let (h, w) = field.shape();
    let ch = h.div_ceil(factor);
    let cw = w.div_ceil(factor);
    let mut coarse = vec![0.0; ch * cw];
    for (bi, row) in coarse.chunks_mut(cw).enumerate() {
        for (bj, cell) in row.iter_mut().enumerate() {
            let (r0, r1) = (bi * factor, ((bi + 1) * factor).min(h));
            let (c0, c1) = (bj * factor, ((bj + 1) * factor).min(w));
            let mut acc = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    acc += field.get(r, c);
                }
            }
            *cell = acc / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    let f = factor as f64;
    let coord = |fine: usize, n: usize| -> (usize, usize, f64) {
        // coarse cell i has its center at fine coordinate (i + 0.5) * f - 0.5
        let pos = ((fine as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    Field2D::from_fn(h, w, field.pixel_size(), field.units(), |r, c| {
        let (y0, y1, ty) = coord(r, ch);
        let (x0, x1, tx) = coord(c, cw);
        let at = |y: usize, x: usize| coarse[y * cw + x];
        (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
            + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1))
    })
}

fn sample_beta(rng: &mut impl Rng, alpha: f64) -> Result<f64> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("beta concentration: {e}")))?;
    let a: f64 = gamma.sample(rng);
    let b: f64 = gamma.sample(rng);
    // both draws can underflow to 0 for tiny alpha
    if a + b == 0.0 {
        return Ok(if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    }
    Ok(a / (a + b))
}

/// `max(0, lambda * real + (1 - lambda) * (interp + eps))` with `lambda ~ Beta(alpha, alpha)`.
///
/// The seed drives two independent ChaCha streams: stream 0 for lambda,
/// stream 1 for the pixel noise.
pub fn mixup(
    real: &Field2D,
    interp: &Field2D,
    alpha: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Field2D> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mixup alpha must be > 0, got {alpha}"
        )));
    }
    let mut lambda_rng = ChaCha8Rng::seed_from_u64(seed);
    lambda_rng.set_stream(0);
    let lambda = sample_beta(&mut lambda_rng, alpha)?;
    mixup_with_lambda(real, interp, lambda, noise_sigma, seed)
}

/// Mix-up with a caller-chosen weight; the noise stream is the same one [`mixup`] uses.
pub fn mixup_with_lambda(
    real: &Field2D,
    interp: &Field2D,
    lambda: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Field2D> {
    if real.shape() != interp.shape() {
        return Err(Error::ShapeMismatch {
            op: "mixup",
            left: format!("{:?}", real.shape()),
            right: format!("{:?}", interp.shape()),
        });
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "mixing weight must lie in [0, 1], got {lambda}"
        )));
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let normal = Normal::new(0.0, noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
    let values = real
        .values()
        .iter()
        .zip(interp.values())
        .map(|(&a, &b)| {
            let eps = if noise_sigma > 0.0 {
                normal.sample(&mut noise_rng)
            } else {
                0.0
            };
            (lambda * a + (1.0 - lambda) * (b + eps)).max(0.0)
        })
        .collect();
    real.with_values(values)
}
