//! Gradient-quality instrumentation: feature inversion, radially averaged
//! power spectra, amplitude-perturbation sweeps and finite-difference checks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::analytic::{anneal_tau, gamma_soft_at, soft_log_features, SoftGeomConfig};
use crate::autodiff::{relative_error, Shape, Tape, Var};
use crate::emulator::{feature_loss, EmulatorParams, DEFAULT_LOSS_WEIGHTS};
use crate::error::{Error, Result};
use crate::grid::{normalize, Field2D, NormalizationSpec, Units};
use crate::targets::{gamma_exact, ThresholdSpec};

pub const DEFAULT_INVERSION_STEPS: usize = 200;
pub const DEFAULT_INVERSION_LR: f64 = 0.1;
pub const DEFAULT_LAMBDA_TV: f64 = 1e-5;
pub const DEFAULT_LAMBDA_L2: f64 = 1e-6;
pub const GRADCHECK_FLAG: f64 = 1e-4;
const SPECTRUM_FLOOR: f64 = 1e-30;

pub use crate::analytic::tv_norm;

/// A differentiable map from a normalized field to log-space descriptors.
#[derive(Debug, Clone)]
pub enum Surrogate {
    Analytic {
        geom: SoftGeomConfig,
        norm: NormalizationSpec,
    },
    Emulator(Box<EmulatorParams>),
}

impl Surrogate {
    pub fn norm(&self) -> &NormalizationSpec {
        match self {
            Surrogate::Analytic { norm, .. } => norm,
            Surrogate::Emulator(p) => &p.norm,
        }
    }

    pub fn pixel_size(&self) -> f64 {
        match self {
            Surrogate::Analytic { geom, .. } => geom.pixel_size,
            Surrogate::Emulator(p) => p.config.pixel_size,
        }
    }

    pub fn n_levels(&self) -> usize {
        match self {
            Surrogate::Analytic { geom, .. } => geom.n_levels(),
            Surrogate::Emulator(p) => p.config.n_levels,
        }
    }

    pub fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if let Surrogate::Emulator(p) = self {
            if (p.config.height, p.config.width) != (height, width) {
                return Err(Error::ShapeMismatch {
                    op: "surrogate input",
                    left: format!("{height}x{width}"),
                    right: format!("{}x{}", p.config.height, p.config.width),
                });
            }
        }
        if height < 3 || width < 3 {
            return Err(Error::InvalidField(format!("{height}x{width} is too small")));
        }
        Ok(())
    }

    /// Log-space features `[log1p A, log1p P, log1p CC or symlog chi]` of a
    /// grid variable; `step` drives the analytic temperature schedule.
    pub fn features_at(&self, t: &mut Tape, x: Var, step: u32) -> Result<Var> {
        match self {
            Surrogate::Analytic { geom, .. } => {
                let g = gamma_soft_at(t, x, geom, anneal_tau(geom, step))?;
                soft_log_features(t, g)
            }
            Surrogate::Emulator(p) => {
                let f = t.flatten(x);
                Ok(p.forward_both(t, f)?.1)
            }
        }
    }

    pub fn features(&self, t: &mut Tape, x: Var) -> Result<Var> {
        self.features_at(t, x, 0)
    }

    /// Descriptor estimate `[A, P, CC]` per level for a normalized field.
    /// The analytic Euler channel is reported unscaled.
    pub fn gamma(&self, x: &Field2D) -> Result<Vec<f64>> {
        self.check_shape(x.height(), x.width())?;
        let mut t = Tape::new();
        let xv = grid_const(&mut t, x)?;
        let f = self.features(&mut t, xv)?;
        Ok(match self {
            Surrogate::Analytic { .. } => t
                .value(f)
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if i % 3 == 2 {
                        v.signum() * v.abs().exp_m1()
                    } else {
                        v.exp_m1()
                    }
                })
                .collect(),
            Surrogate::Emulator(_) => t.value(f).iter().map(|v| v.exp_m1()).collect(),
        })
    }
}

fn grid_const(t: &mut Tape, x: &Field2D) -> Result<Var> {
    t.constant(x.values().to_vec(), Shape::Grid(x.height(), x.width()))
}

/// Weighted L1 Minkowski loss of the surrogate at `x` against `target`
/// (physical gamma), with its gradient in normalized units.
pub fn loss_and_grad(
    surrogate: &Surrogate,
    x: &Field2D,
    target: &[f64],
    weights: [f64; 3],
) -> Result<(f64, Vec<f64>)> {
    surrogate.check_shape(x.height(), x.width())?;
    let mut t = Tape::new();
    let xv = t.var(x.values().to_vec(), Shape::Grid(x.height(), x.width()))?;
    let f = surrogate.features(&mut t, xv)?;
    let l = feature_loss(&mut t, f, target, weights)?;
    let g = t.backward(l)?;
    Ok((t.scalar_value(l), g.wrt(xv)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataTerm {
    /// Squared L2 in log space.
    #[default]
    SquaredL2,
    /// Unsquared L2 in log space.
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda_tv: f64,
    pub lambda_l2: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub data_term: DataTerm,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_INVERSION_STEPS,
            lr: DEFAULT_INVERSION_LR,
            lambda_tv: DEFAULT_LAMBDA_TV,
            lambda_l2: DEFAULT_LAMBDA_L2,
            seed: 0,
            height: 32,
            width: 32,
            data_term: DataTerm::SquaredL2,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(self.lambda_tv >= 0.0 && self.lambda_l2 >= 0.0) {
            return bad("regularization weights must be >= 0".into());
        }
        if self.height < 3 || self.width < 3 {
            return bad(format!("{}x{} grid is too small", self.height, self.width));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionStep {
    pub step: usize,
    pub loss: f64,
    pub data: f64,
    pub tv: f64,
    pub l2: f64,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub x0: Field2D,
    pub field: Field2D,
    pub trace: Vec<InversionStep>,
}

impl InversionResult {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0].loss
    }

    /// Objective at the returned field.
    pub fn final_loss(&self) -> f64 {
        self.trace[self.trace.len() - 1].loss
    }
}

/// Seeded standard-normal starting field in normalized units.
pub fn inversion_start(cfg: &InversionConfig, pixel_size: f64) -> Result<Field2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v: Vec<f64> = (0..cfg.height * cfg.width)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Field2D::new(cfg.height, cfg.width, pixel_size, v, Units::Normalized)
}

/// Gradient descent from seeded noise toward `log1p(target_gamma)`.
pub fn invert(
    cfg: &InversionConfig,
    surrogate: &Surrogate,
    target_gamma: &[f64],
) -> Result<InversionResult> {
    if let Some(v) = target_gamma.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("target entry {v} < 0")));
    }
    let feats: Vec<f64> = target_gamma.iter().map(|v| v.ln_1p()).collect();
    invert_features(cfg, surrogate, &feats)
}

/// [`invert`] with the target given directly in log space.
pub fn invert_features(
    cfg: &InversionConfig,
    surrogate: &Surrogate,
    target: &[f64],
) -> Result<InversionResult> {
    cfg.validate()?;
    surrogate.check_shape(cfg.height, cfg.width)?;
    if target.len() != 3 * surrogate.n_levels() {
        return Err(Error::ShapeMismatch {
            op: "inversion target",
            left: target.len().to_string(),
            right: (3 * surrogate.n_levels()).to_string(),
        });
    }
    let x0 = inversion_start(cfg, surrogate.pixel_size())?;
    let mut x = x0.values().to_vec();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut t = Tape::new();
        let xv = t.var(x.clone(), Shape::Grid(cfg.height, cfg.width))?;
        let (loss, rec) = objective_on_tape(&mut t, cfg, surrogate, target, xv, step)?;
        if !rec.loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("inversion objective {}", rec.loss),
            });
        }
        trace.push(rec);
        if step == cfg.steps {
            break;
        }
        let g = t.backward(loss)?.wrt(xv);
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite gradient at pixel {i}"),
            });
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= cfg.lr * gi;
        }
    }
    let field = x0.with_values(x)?;
    Ok(InversionResult { x0, field, trace })
}

fn objective_on_tape(
    t: &mut Tape,
    cfg: &InversionConfig,
    surrogate: &Surrogate,
    target: &[f64],
    xv: Var,
    step: usize,
) -> Result<(Var, InversionStep)> {
    let f = surrogate.features_at(t, xv, step as u32)?;
    let tg = t.constant(target.to_vec(), f.shape())?;
    let d = t.sub(f, tg)?;
    let sq = t.mul(d, d)?;
    let mut data = t.sum(sq);
    if cfg.data_term == DataTerm::L2 {
        data = t.sqrt(data)?;
    }
    let tv = tv_norm(t, xv)?;
    let xx = t.mul(xv, xv)?;
    let l2 = t.sum(xx);
    let a = t.scale(tv, cfg.lambda_tv);
    let b = t.scale(l2, cfg.lambda_l2);
    let reg = t.add(a, b)?;
    let loss = t.add(data, reg)?;
    let rec = InversionStep {
        step,
        loss: t.scalar_value(loss),
        data: t.scalar_value(data),
        tv: t.scalar_value(tv),
        l2: t.scalar_value(l2),
    };
    Ok((loss, rec))
}

/// Inversion objective at `x` with the surrogate temperature of `step`;
/// `target` is in log space.
pub fn inversion_objective(
    cfg: &InversionConfig,
    surrogate: &Surrogate,
    target: &[f64],
    x: &Field2D,
    step: usize,
) -> Result<InversionStep> {
    surrogate.check_shape(x.height(), x.width())?;
    let mut t = Tape::new();
    let xv = grid_const(&mut t, x)?;
    Ok(objective_on_tape(&mut t, cfg, surrogate, target, xv, step)?.1)
}

/// Azimuthally averaged power spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rapsd {
    /// `S(k)` for `k = 0..=floor(min(H, W)/2)`.
    pub power: Vec<f64>,
    /// Number of modes in each annulus.
    pub counts: Vec<usize>,
    /// Total power of modes beyond the last annulus.
    pub outer_power: f64,
    /// Mean square of the windowed field.
    pub windowed_mean_square: f64,
}

impl Rapsd {
    pub fn wavenumbers(&self) -> std::ops::Range<usize> {
        0..self.power.len()
    }

    /// `sum_k N_k S(k)` plus the outer modes.
    pub fn total_power(&self) -> f64 {
        self.power
            .iter()
            .zip(&self.counts)
            .map(|(s, &n)| s * n as f64)
            .sum::<f64>()
            + self.outer_power
    }
}

fn hann(n: usize) -> Vec<f64> {
    let d = (n - 1) as f64;
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / d).cos())
        .collect()
}

fn freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Hann-windowed periodogram `|F(w x)|^2 / (HW)^2` averaged over the rings
/// `k - 1/2 <= |k| < k + 1/2`.
pub fn rapsd(field: &Field2D) -> Result<Rapsd> {
    let (h, w) = field.shape();
    if h < 4 || w < 4 {
        return Err(Error::InvalidField(format!("rapsd needs at least 4x4, got {h}x{w}")));
    }
    let (wy, wx) = (hann(h), hann(w));
    let mut buf: Vec<Complex<f64>> = field
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| Complex::new(v * wy[i / w] * wx[i % w], 0.0))
        .collect();
    let windowed_mean_square = buf.iter().map(|c| c.re * c.re).sum::<f64>() / (h * w) as f64;

    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }

    let kmax = h.min(w) / 2;
    let norm = ((h * w) as f64).powi(2);
    let mut power = vec![0.0; kmax + 1];
    let mut counts = vec![0usize; kmax + 1];
    let mut outer_power = 0.0;
    for r in 0..h {
        let ky = freq(r, h);
        for c in 0..w {
            let kx = freq(c, w);
            let p = buf[r * w + c].norm_sqr() / norm;
            let k = ((kx * kx + ky * ky).sqrt() + 0.5).floor() as usize;
            if k <= kmax {
                power[k] += p;
                counts[k] += 1;
            } else {
                outer_power += p;
            }
        }
    }
    for (s, &n) in power.iter_mut().zip(&counts) {
        if n > 0 {
            *s /= n as f64;
        }
    }
    Ok(Rapsd {
        power,
        counts,
        outer_power,
        windowed_mean_square,
    })
}

fn check_pair(a: &Field2D, b: &Field2D) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "spectral comparison",
            left: format!("{:?}", a.shape()),
            right: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// `S_model(k) / max(S_ref(k), 1e-30)`.
pub fn spectral_ratio(model: &Field2D, reference: &Field2D) -> Result<Vec<f64>> {
    check_pair(model, reference)?;
    let (m, r) = (rapsd(model)?, rapsd(reference)?);
    Ok(m.power
        .iter()
        .zip(&r.power)
        .map(|(a, b)| a / b.max(SPECTRUM_FLOOR))
        .collect())
}

/// Mean over `k >= 1` of `|log10 S_model(k) - log10 S_ref(k)|`.
pub fn raps_error(model: &Field2D, reference: &Field2D) -> Result<f64> {
    check_pair(model, reference)?;
    let (m, r) = (rapsd(model)?, rapsd(reference)?);
    let n = m.power.len() - 1;
    Ok(m.power[1..]
        .iter()
        .zip(&r.power[1..])
        .map(|(a, b)| (a.max(SPECTRUM_FLOOR).log10() - b.max(SPECTRUM_FLOOR).log10()).abs())
        .sum::<f64>()
        / n as f64)
}

/// Exact descriptor settings for the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactSpec {
    pub thresholds: ThresholdSpec,
    pub epsilon: f64,
    pub infinite_cutoff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub exact: Vec<f64>,
    pub surrogate: Vec<f64>,
    /// Share of the squared loss gradient that falls inside the mask.
    pub grad_energy_in_mask: f64,
}

/// Scale the masked region of a physical field by each `alpha` and record
/// exact and surrogate descriptors plus the gradient attribution. The loss
/// target is the exact gamma of the unperturbed field.
pub fn mechanistic_sweep(
    base: &Field2D,
    mask: &[bool],
    alphas: &[f64],
    surrogate: &Surrogate,
    exact: &ExactSpec,
) -> Result<Vec<SweepRow>> {
    if base.units() != Units::Physical {
        return Err(Error::InvalidField("sweep base must be in mm/h".into()));
    }
    if mask.len() != base.len() {
        return Err(Error::ShapeMismatch {
            op: "sweep mask",
            left: mask.len().to_string(),
            right: base.len().to_string(),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("sweep mask is empty".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::InvalidArgument(format!("alpha {a} must be finite and >= 0")));
    }
    if exact.thresholds.n_levels() != surrogate.n_levels() {
        return Err(Error::ShapeMismatch {
            op: "sweep levels",
            left: exact.thresholds.n_levels().to_string(),
            right: surrogate.n_levels().to_string(),
        });
    }
    surrogate.check_shape(base.height(), base.width())?;
    let exact_of = |f: &Field2D| {
        gamma_exact(f, &exact.thresholds, exact.epsilon, exact.infinite_cutoff, false)
            .map(|g| g.entries)
    };
    let baseline = exact_of(base)?;
    alphas
        .par_iter()
        .map(|&alpha| {
            let v: Vec<f64> = base
                .values()
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { alpha * x } else { x })
                .collect();
            let f = base.with_values(v)?;
            let xn = normalize(&f, surrogate.norm())?;
            let (_, g) = loss_and_grad(surrogate, &xn, &baseline, DEFAULT_LOSS_WEIGHTS)?;
            let total: f64 = g.iter().map(|v| v * v).sum();
            let inside: f64 = g.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| v * v).sum();
            Ok(SweepRow {
                alpha,
                exact: exact_of(&f)?,
                surrogate: surrogate.gamma(&xn)?,
                grad_energy_in_mask: if total > 0.0 { inside / total } else { 0.0 },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub h: f64,
    pub per_field: Vec<f64>,
    pub max_rel_err: f64,
    /// Indices of fields whose error exceeds the flag level.
    pub flagged: Vec<usize>,
}

/// Central differences against reverse mode for the Minkowski loss of the
/// surrogate, one normalized field and physical target per case.
pub fn gradcheck(
    surrogate: &Surrogate,
    cases: &[(Field2D, Vec<f64>)],
    h: f64,
) -> Result<GradcheckReport> {
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("h must be in [1e-8, 1e-3], got {h}")));
    }
    let per_field = cases
        .par_iter()
        .map(|(x, target)| {
            let (_, grad) = loss_and_grad(surrogate, x, target, DEFAULT_LOSS_WEIGHTS)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Ok(f64::INFINITY);
            }
            let mut t = Tape::new();
            let xv = t.var(x.values().to_vec(), Shape::Grid(x.height(), x.width()))?;
            let mark = t.len();
            let mut v = x.values().to_vec();
            let mut fd = Vec::with_capacity(v.len());
            let eval = |t: &mut Tape, v: &[f64]| -> Result<f64> {
                t.truncate(mark);
                let xc = t.constant(v.to_vec(), xv.shape())?;
                let f = surrogate.features(t, xc)?;
                let l = feature_loss(t, f, target, DEFAULT_LOSS_WEIGHTS)?;
                Ok(t.scalar_value(l))
            };
            for i in 0..v.len() {
                let x0 = v[i];
                v[i] = x0 + h;
                let up = eval(&mut t, &v)?;
                v[i] = x0 - h;
                let down = eval(&mut t, &v)?;
                v[i] = x0;
                fd.push((up - down) / (2.0 * h));
            }
            Ok(relative_error(&grad, &fd))
        })
        .collect::<Result<Vec<f64>>>()?;
    let max_rel_err = per_field.iter().copied().fold(0.0, f64::max);
    let flagged = per_field
        .iter()
        .enumerate()
        .filter(|(_, e)| !(**e <= GRADCHECK_FLAG))
        .map(|(i, _)| i)
        .collect();
    Ok(GradcheckReport {
        h,
        per_field,
        max_rel_err,
        flagged,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// `k,S,N`.
pub fn write_spectrum_csv(path: &Path, s: &Rapsd) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "k,S,N")?;
    for k in s.wavenumbers() {
        writeln!(w, "{k},{:e},{}", s.power[k], s.counts[k])?;
    }
    w.flush()?;
    Ok(())
}

/// `k,ratio`.
pub fn write_ratio_csv(path: &Path, ratio: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "k,ratio")?;
    for (k, r) in ratio.iter().enumerate() {
        writeln!(w, "{k},{r:e}")?;
    }
    w.flush()?;
    Ok(())
}

/// `step,loss,data,tv,l2`.
pub fn write_trace_csv(path: &Path, trace: &[InversionStep]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "step,loss,data,tv,l2")?;
    for s in trace {
        writeln!(w, "{},{:e},{:e},{:e},{:e}", s.step, s.loss, s.data, s.tv, s.l2)?;
    }
    w.flush()?;
    Ok(())
}

/// `alpha,A_i,P_i,CC_i...,soft_A_i,soft_P_i,soft_CC_i...,grad_energy_in_mask`.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = create(path)?;
    let n = rows.first().map_or(0, |r| r.exact.len() / 3);
    let mut header = vec!["alpha".to_string()];
    for prefix in ["", "soft_"] {
        for i in 0..n {
            for c in ["A", "P", "CC"] {
                header.push(format!("{prefix}{c}_{i}"));
            }
        }
    }
    header.push("grad_energy_in_mask".into());
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let mut cells = vec![format!("{}", r.alpha)];
        cells.extend(r.exact.iter().chain(&r.surrogate).map(|v| format!("{v:e}")));
        cells.push(format!("{:e}", r.grad_energy_in_mask));
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// 8-bit binary PGM, min-max scaled; a constant field maps to 0.
pub fn write_pgm(path: &Path, field: &Field2D) -> Result<()> {
    let mut w = create(path)?;
    let (lo, hi) = (field.min(), field.max());
    let span = hi - lo;
    write!(w, "P5\n{} {}\n255\n", field.width(), field.height())?;
    let bytes: Vec<u8> = field
        .values()
        .iter()
        .map(|v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}
