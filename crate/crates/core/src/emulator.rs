//! Trainable surrogate for the gamma vector.
//!
//! The backbone is a residual dense network over the flattened normalized
//! field plus one extensive feature, the pixel sum scaled by `1/sqrt(HW)`:
//!
//! ```text
//! z0 = W0 [x; sum(x)/sqrt(HW)] + b0            (unconstrained)
//! z  = z + Wb gelu(Wa z + ba) + bb             (spectrally normalized)
//! ```
//!
//! The constrained arm ends in three heads that hold by construction for any
//! parameters: a monotone area curve built from tail sums of a softmax, a
//! perimeter `sqrt(4 pi A) (1 + softplus(r))` and softplus counts. The two
//! ablation arms replace the heads with one linear map to log-space outputs.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{normalize, Field2D, NormalizationSpec};
use crate::targets::{isoperimetric_violation, quantile_sorted};

pub const CHECKPOINT_MAGIC: &str = "MGEMU01";
pub const DEFAULT_LOSS_WEIGHTS: [f64; 3] = [3.0, 1.0, 1.5];
/// Learning rate of the full-scale configuration.
pub const LARGE_CORPUS_LEARNING_RATE: f64 = 7.75e-5;
pub const DEFAULT_TAU_TRUST: f64 = 0.005725;
const SIGMA_FLOOR: f64 = 1e-12;
pub const ISO_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Constrained,
    Unconstrained,
    Nosn,
}

impl Arch {
    pub fn spectral(self) -> bool {
        self != Arch::Nosn
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constrained" => Ok(Arch::Constrained),
            "unconstrained" => Ok(Arch::Unconstrained),
            "nosn" | "unconstrained_no_sn" => Ok(Arch::Nosn),
            _ => Err(Error::InvalidArgument(format!("unknown architecture {s}"))),
        }
    }
}

/// Dense layer `y = W x + b`, optionally divided by a power-iteration
/// estimate of the spectral norm of `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLinear {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Left singular-vector estimate, persisted across steps.
    pub u: Vec<f64>,
    pub normalize: bool,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm2(&v).max(SIGMA_FLOOR);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl SpectralLinear {
    pub fn init(rows: usize, cols: usize, normalize: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let weight = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..rows).map(|_| rng.random_range(-bound..bound)).collect();
        let u = unit((0..rows).map(|_| StandardNormal.sample(rng)).collect());
        Self {
            rows,
            cols,
            weight,
            bias,
            u,
            normalize,
        }
    }

    pub fn from_weight(rows: usize, cols: usize, weight: Vec<f64>, normalize: bool) -> Self {
        assert_eq!(weight.len(), rows * cols);
        let u = unit((0..rows).map(|i| 1.0 + 0.1 * i as f64).collect());
        Self {
            rows,
            cols,
            weight,
            bias: vec![0.0; rows],
            u,
            normalize,
        }
    }

    fn mul_t(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, ui) in self.weight.chunks_exact(self.cols).zip(u) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += ui * w;
            }
        }
        out
    }

    fn mul(&self, v: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `v = W^T u / |W^T u|`, the right vector paired with the current `u`.
    pub fn right_vector(&self) -> Vec<f64> {
        unit(self.mul_t(&self.u))
    }

    /// `u^T W v`, floored at 1e-12.
    pub fn sigma(&self) -> f64 {
        let v = self.right_vector();
        let wv = self.mul(&v);
        wv.iter().zip(&self.u).map(|(a, b)| a * b).sum::<f64>().max(SIGMA_FLOOR)
    }

    pub fn power_iterate(&mut self, n: usize) {
        for _ in 0..n {
            let v = self.right_vector();
            self.u = unit(self.mul(&v));
        }
    }

    pub fn effective_weight(&self) -> Vec<f64> {
        if !self.normalize {
            return self.weight.clone();
        }
        let s = self.sigma();
        self.weight.iter().map(|w| w / s).collect()
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// One power-iteration update of `u` followed by `W / sigma`.
pub fn spectral_normalize(layer: &mut SpectralLinear, n_power_iters: usize) -> Result<Vec<f64>> {
    if n_power_iters == 0 {
        return Err(Error::InvalidArgument("need at least one power iteration".into()));
    }
    layer.power_iterate(n_power_iters);
    let s = layer.sigma();
    Ok(layer.weight.iter().map(|w| w / s).collect())
}

/// Largest singular value by power iteration run to convergence.
pub fn spectral_norm(rows: usize, cols: usize, weight: &[f64]) -> f64 {
    let mut l = SpectralLinear::from_weight(rows, cols, weight.to_vec(), true);
    let mut prev = 0.0;
    for _ in 0..10_000 {
        l.power_iterate(5);
        let s = l.sigma();
        if (s - prev).abs() <= 1e-13 * s {
            return s;
        }
        prev = s;
    }
    prev
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorConfig {
    pub arch: Arch,
    pub height: usize,
    pub width: usize,
    pub n_levels: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    /// km
    pub pixel_size: f64,
}

impl EmulatorConfig {
    pub fn new(arch: Arch, height: usize, width: usize, n_levels: usize, pixel_size: f64) -> Self {
        Self {
            arch,
            height,
            width,
            n_levels,
            hidden: 128,
            n_blocks: 2,
            pixel_size,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.height * self.width
    }

    /// Upper bound on any excursion area, km^2.
    pub fn area_cap(&self) -> f64 {
        self.n_inputs() as f64 * self.pixel_size * self.pixel_size
    }

    fn validate(&self) -> Result<()> {
        if self.n_inputs() == 0 || self.n_levels == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(format!("degenerate emulator config {self:?}")));
        }
        if !(self.pixel_size > 0.0) {
            return Err(Error::InvalidArgument("pixel size must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorParams {
    pub config: EmulatorConfig,
    pub norm: NormalizationSpec,
    /// Input layer, then `(a, b)` per residual block, then the heads:
    /// constrained `[area logits, area total, roughness, counts]`,
    /// otherwise a single `3N` output layer.
    pub layers: Vec<SpectralLinear>,
}

struct Bound {
    layers: Vec<(Var, Var)>,
    leaves: Vec<(Var, Var)>,
}

impl EmulatorParams {
    pub fn init(config: EmulatorConfig, norm: NormalizationSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        norm.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, n) = (config.hidden, config.n_levels);
        let sn = config.arch.spectral();
        let mut layers = vec![SpectralLinear::init(h, config.n_inputs() + 1, false, &mut rng)];
        for _ in 0..config.n_blocks {
            layers.push(SpectralLinear::init(h, h, sn, &mut rng));
            layers.push(SpectralLinear::init(h, h, sn, &mut rng));
        }
        match config.arch {
            Arch::Constrained => {
                layers.push(SpectralLinear::init(n + 1, h, sn, &mut rng));
                layers.push(SpectralLinear::init(1, h, sn, &mut rng));
                layers.push(SpectralLinear::init(n, h, sn, &mut rng));
                layers.push(SpectralLinear::init(n, h, sn, &mut rng));
            }
            Arch::Unconstrained | Arch::Nosn => {
                layers.push(SpectralLinear::init(3 * n, h, sn, &mut rng));
            }
        }
        Ok(Self {
            config,
            norm,
            layers,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.n_params()).sum()
    }

    fn head_start(&self) -> usize {
        1 + 2 * self.config.n_blocks
    }

    fn bind(&self, t: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut leaves = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let shape = Shape::Grid(l.rows, l.cols);
            let (w, b) = if trainable {
                (
                    t.var(l.weight.clone(), shape)?,
                    t.var(l.bias.clone(), Shape::Vector(l.rows))?,
                )
            } else {
                (
                    t.constant(l.weight.clone(), shape)?,
                    t.constant(l.bias.clone(), Shape::Vector(l.rows))?,
                )
            };
            leaves.push((w, b));
            let w_eff = if l.normalize {
                let u = t.constant(l.u.clone(), Shape::Vector(l.rows))?;
                let v = t.constant(l.right_vector(), Shape::Vector(l.cols))?;
                let wv = t.matvec(w, v)?;
                let s = t.dot(u, wv)?;
                let s = if t.scalar_value(s) < SIGMA_FLOOR {
                    t.scalar(SIGMA_FLOOR)
                } else {
                    s
                };
                t.div(w, s)?
            } else {
                w
            };
            layers.push((w_eff, b));
        }
        Ok(Bound { layers, leaves })
    }

    fn linear(t: &mut Tape, layer: (Var, Var), x: Var) -> Result<Var> {
        let y = t.matvec(layer.0, x)?;
        t.add(y, layer.1)
    }

    /// Input vector of `H*W` normalized values plus the sum feature.
    fn augment(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let s = t.sum(x);
        let s = t.scale(s, 1.0 / (self.config.n_inputs() as f64).sqrt());
        t.concat(&[x, s])
    }

    fn latent_bound(&self, t: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        if x.shape() != Shape::Vector(self.config.n_inputs()) {
            return Err(Error::ShapeMismatch {
                op: "emulator input",
                left: x.shape().to_string(),
                right: format!("vector({})", self.config.n_inputs()),
            });
        }
        let a = self.augment(t, x)?;
        let mut z = Self::linear(t, b.layers[0], a)?;
        for k in 0..self.config.n_blocks {
            let h = Self::linear(t, b.layers[1 + 2 * k], z)?;
            let h = t.gelu(h);
            let h = Self::linear(t, b.layers[2 + 2 * k], h)?;
            z = t.add(z, h)?;
        }
        Ok(z)
    }

    /// `(gamma_hat, log1p features)` of one sample.
    fn heads_bound(&self, t: &mut Tape, b: &Bound, z: Var) -> Result<(Var, Var)> {
        let n = self.config.n_levels;
        let hs = self.head_start();
        match self.config.arch {
            Arch::Constrained => {
                let logits = Self::linear(t, b.layers[hs], z)?;
                let raw_total = Self::linear(t, b.layers[hs + 1], z)?;
                let raw_r = Self::linear(t, b.layers[hs + 2], z)?;
                let raw_cc = Self::linear(t, b.layers[hs + 3], z)?;
                let a = head_area(t, logits, raw_total, self.config.area_cap())?;
                let p = head_perimeter(t, a, raw_r)?;
                let cc = head_counts(t, raw_cc);
                let gamma = interleave(t, a, p, cc, n)?;
                let feats = t.log1p(gamma)?;
                Ok((gamma, feats))
            }
            Arch::Unconstrained | Arch::Nosn => {
                let feats = Self::linear(t, b.layers[hs], z)?;
                let e = t.exp(feats);
                let gamma = t.add_const(e, -1.0);
                Ok((gamma, feats))
            }
        }
    }

    /// Backbone latent for a differentiable input vector.
    pub fn latent(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let b = self.bind(t, false)?;
        self.latent_bound(t, &b, x)
    }

    /// `gamma_hat` for a differentiable input vector; weights are constants.
    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_both(t, x)?.0)
    }

    /// `(gamma_hat, log1p(gamma_hat))`.
    pub fn forward_both(&self, t: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let b = self.bind(t, false)?;
        let z = self.latent_bound(t, &b, x)?;
        self.heads_bound(t, &b, z)
    }

    /// Prediction for one flattened normalized input.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[x.to_vec()])?.remove(0))
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut t = Tape::new();
        let b = self.bind(&mut t, false)?;
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let mark = t.len();
            let xv = t.constant(x.clone(), Shape::Vector(x.len()))?;
            let z = self.latent_bound(&mut t, &b, xv)?;
            let (g, _) = self.heads_bound(&mut t, &b, z)?;
            out.push(t.value(g).to_vec());
            debug_assert!(t.len() > mark);
        }
        Ok(out)
    }

    /// Prediction for a physical field.
    pub fn predict_field(&self, field: &Field2D) -> Result<Vec<f64>> {
        self.check_field(field)?;
        let x = normalize(field, &self.norm)?;
        self.predict(x.values())
    }

    fn check_field(&self, field: &Field2D) -> Result<()> {
        if field.shape() != (self.config.height, self.config.width) {
            return Err(Error::ShapeMismatch {
                op: "emulator field",
                left: format!("{:?}", field.shape()),
                right: format!("{:?}", (self.config.height, self.config.width)),
            });
        }
        Ok(())
    }

    /// Spectral norm of the input layer composed with the sum augmentation.
    pub fn input_layer_norm(&self) -> f64 {
        let l = &self.layers[0];
        let n = self.config.n_inputs();
        let c = 1.0 / (n as f64).sqrt();
        let mut w = vec![0.0; l.rows * n];
        for r in 0..l.rows {
            let row = &l.weight[r * l.cols..(r + 1) * l.cols];
            for j in 0..n {
                w[r * n + j] = row[j] + c * row[n];
            }
        }
        spectral_norm(l.rows, n, &w)
    }

    pub fn power_iterate(&mut self, n: usize) {
        for l in self.layers.iter_mut().filter(|l| l.normalize) {
            l.power_iterate(n);
        }
    }
}

/// `A_i = softplus(raw_total) * cap * sum_{k > i} softmax(logits)_k`, `i < N`.
pub fn head_area(t: &mut Tape, logits: Var, raw_total: Var, cap: f64) -> Result<Var> {
    let m = match logits.shape() {
        Shape::Vector(m) if m >= 2 => m,
        s => {
            return Err(Error::ShapeMismatch {
                op: "head_area",
                left: s.to_string(),
                right: "vector(N+1)".into(),
            })
        }
    };
    let n = m - 1;
    let p = t.softmax(logits)?;
    let mut tri = vec![0.0; n * m];
    for i in 0..n {
        for k in i + 1..m {
            tri[i * m + k] = 1.0;
        }
    }
    let tri = t.constant(tri, Shape::Grid(n, m))?;
    let tail = t.matvec(tri, p)?;
    let total = t.softplus(raw_total);
    let total = t.sum(total);
    let total = t.scale(total, cap);
    t.mul(tail, total)
}

/// `P = sqrt(4 pi A) * (1 + ISO_MARGIN + softplus(raw_r))`. The margin keeps
/// `P^2 >= 4 pi A` after rounding when the softplus underflows.
pub fn head_perimeter(t: &mut Tape, area: Var, raw_r: Var) -> Result<Var> {
    let a = t.scale(area, 4.0 * PI);
    let s = t.sqrt(a)?;
    let r = t.softplus(raw_r);
    let r = t.add_const(r, 1.0 + ISO_MARGIN);
    t.mul(s, r)
}

pub fn head_counts(t: &mut Tape, raw: Var) -> Var {
    t.softplus(raw)
}

fn interleave(t: &mut Tape, a: Var, p: Var, cc: Var, n: usize) -> Result<Var> {
    let cat = t.concat(&[a, p, cc])?;
    let mut perm = vec![0.0; 9 * n * n];
    for i in 0..n {
        for c in 0..3 {
            perm[(3 * i + c) * 3 * n + c * n + i] = 1.0;
        }
    }
    let perm = t.constant(perm, Shape::Grid(3 * n, 3 * n))?;
    t.matvec(perm, cat)
}

fn check_nonneg(v: &[f64], what: &str) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{what} has entry {x} < 0")));
    }
    Ok(())
}

/// `sum_c lambda_c sum_i |log(1 + gamma_hat) - log(1 + gamma)|`.
pub fn minkowski_loss(gamma_hat: &[f64], gamma: &[f64], weights: [f64; 3]) -> Result<f64> {
    if gamma_hat.len() != gamma.len() || gamma.len() % 3 != 0 {
        return Err(Error::ShapeMismatch {
            op: "minkowski_loss",
            left: gamma_hat.len().to_string(),
            right: gamma.len().to_string(),
        });
    }
    check_nonneg(gamma_hat, "prediction")?;
    check_nonneg(gamma, "target")?;
    Ok(gamma_hat
        .iter()
        .zip(gamma)
        .enumerate()
        .map(|(i, (a, b))| weights[i % 3] * (a.ln_1p() - b.ln_1p()).abs())
        .sum())
}

/// Weighted L1 between log-space features on the tape and `log1p(target)`.
pub fn feature_loss(t: &mut Tape, feats: Var, target: &[f64], weights: [f64; 3]) -> Result<Var> {
    if feats.shape() != Shape::Vector(target.len()) {
        return Err(Error::ShapeMismatch {
            op: "feature_loss",
            left: feats.shape().to_string(),
            right: format!("vector({})", target.len()),
        });
    }
    let tv = t.constant(target.iter().map(|v| v.ln_1p()).collect(), feats.shape())?;
    let w = t.constant((0..target.len()).map(|i| weights[i % 3]).collect(), feats.shape())?;
    let d = t.sub(feats, tv)?;
    let a = t.abs(d);
    let wa = t.mul(a, w)?;
    Ok(t.sum(wa))
}

/// Mean squared error between `log1p` of the two vectors.
pub fn log_mse(gamma_hat: &[f64], gamma: &[f64]) -> f64 {
    let n = gamma.len().max(1) as f64;
    gamma_hat
        .iter()
        .zip(gamma)
        .map(|(a, b)| (a.max(0.0).ln_1p() - b.ln_1p()).powi(2))
        .sum::<f64>()
        / n
}

/// `exp(-tau * MSE)` in `log1p` space.
pub fn trust_weight(gamma_emul_on_truth: &[f64], gamma_true: &[f64], tau_trust: f64) -> Result<f64> {
    if !(tau_trust > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau_trust}")));
    }
    Ok(trust_weight_from_mse(log_mse(gamma_emul_on_truth, gamma_true), tau_trust))
}

pub fn trust_weight_from_mse(mse: f64, tau_trust: f64) -> f64 {
    (-tau_trust * mse).exp()
}

/// `tau = -ln(0.1) / q90` of per-sample log-space errors.
pub fn calibrate_tau_from_errors(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("validation errors"));
    }
    let mut e = errors.to_vec();
    e.sort_by(f64::total_cmp);
    let q90 = quantile_sorted(&e, 0.9);
    if !(q90 > 0.0) {
        return Err(Error::InvalidArgument(format!("90th percentile error {q90} must be > 0")));
    }
    Ok(-(0.1f64.ln()) / q90)
}

/// Calibrate against exact targets on physical fields.
pub fn calibrate_tau_trust(params: &EmulatorParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("validation corpus"));
    }
    let preds = params.predict_batch(&data.inputs)?;
    let errs: Vec<f64> = preds.iter().zip(&data.targets).map(|(p, g)| log_mse(p, g)).collect();
    calibrate_tau_from_errors(&errs)
}

/// Normalized inputs paired with exact targets.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// Flattened normalized fields.
    pub inputs: Vec<Vec<f64>>,
    /// Physical gamma vectors, `3N`.
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn from_fields(fields: &[Field2D], targets: &[Vec<f64>], norm: &NormalizationSpec) -> Result<Self> {
        if fields.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} fields but {} targets",
                fields.len(),
                targets.len()
            )));
        }
        let inputs = fields
            .iter()
            .map(|f| normalize(f, norm).map(Field2D::into_values))
            .collect::<Result<_>>()?;
        Ok(Self {
            inputs,
            targets: targets.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Every input under the symmetries of the grid (8 for square grids,
    /// 4 otherwise); targets are invariant and repeated.
    pub fn dihedral(&self, height: usize, width: usize) -> Self {
        let n_ops = if height == width { 8 } else { 4 };
        let mut out = Self::default();
        for (x, g) in self.inputs.iter().zip(&self.targets) {
            for op in 0..n_ops {
                let y = (0..height * width)
                    .map(|k| {
                        let (mut r, mut c) = (k / width, k % width);
                        if op & 1 == 1 {
                            c = width - 1 - c;
                        }
                        if op & 2 == 2 {
                            r = height - 1 - r;
                        }
                        if op & 4 == 4 {
                            (r, c) = (c, r);
                        }
                        x[r * width + c]
                    })
                    .collect();
                out.inputs.push(y);
                out.targets.push(g.clone());
            }
        }
        out
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}

/// Deterministic `(train, validation)` index split.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub loss_weights: [f64; 3],
    pub seed: u64,
    pub patience: usize,
    pub val_fraction: f64,
    pub power_iters: usize,
    /// Train on every flip and rotation of each training field.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            batch: 32,
            epochs: 40,
            loss_weights: DEFAULT_LOSS_WEIGHTS,
            seed: 0,
            patience: 15,
            val_fraction: 0.1,
            power_iters: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("need lr > 0 and weight decay >= 0".into()));
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if self.batch == 0 || self.power_iters == 0 {
            return Err(Error::InvalidArgument("batch and power_iters must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &EmulatorParams) -> Self {
        let sizes: Vec<usize> = params
            .layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut EmulatorParams, grads: &[Vec<f64>], lr: f64, wd: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let tensors = params
            .layers
            .iter_mut()
            .flat_map(|l| [(&mut l.weight, true), (&mut l.bias, false)]);
        for (k, (theta, decay)) in tensors.enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..theta.len() {
                let mut g = grads[k][i];
                if decay {
                    g += wd * theta[i];
                }
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g;
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g * g;
                theta[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Mean weighted loss and parameter gradients over one batch.
fn batch_gradients(
    params: &EmulatorParams,
    data: &Dataset,
    idx: &[usize],
    weights: [f64; 3],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut t = Tape::new();
    let b = params.bind(&mut t, true)?;
    let mut losses = Vec::with_capacity(idx.len());
    for &i in idx {
        let x = t.constant(data.inputs[i].clone(), Shape::Vector(data.inputs[i].len()))?;
        let z = params.latent_bound(&mut t, &b, x)?;
        let (_, f) = params.heads_bound(&mut t, &b, z)?;
        losses.push(feature_loss(&mut t, f, &data.targets[i], weights)?);
    }
    let all = t.concat(&losses)?;
    let s = t.sum(all);
    let loss = t.scale(s, 1.0 / idx.len() as f64);
    let value = t.scalar_value(loss);
    let g = t.backward(loss)?;
    let grads = b.leaves.iter().flat_map(|&(w, bb)| [g.wrt(w), g.wrt(bb)]).collect();
    Ok((value, grads))
}

/// Mean weighted Minkowski loss over a dataset.
pub fn dataset_loss(params: &EmulatorParams, data: &Dataset, weights: [f64; 3]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(256) {
        let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| data.inputs[i].clone()).collect();
        for (p, &i) in params.predict_batch(&xs)?.iter().zip(chunk) {
            total += p
                .iter()
                .zip(&data.targets[i])
                .enumerate()
                .map(|(k, (a, b))| weights[k % 3] * (a.max(0.0).ln_1p() - b.ln_1p()).abs())
                .sum::<f64>();
        }
    }
    Ok(total / data.len() as f64)
}

/// Adam on the weighted Minkowski loss with early stopping on a held-out
/// split of `data`. Returns the best parameters seen.
pub fn train_emulator(
    mut params: EmulatorParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(EmulatorParams, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let val = data.subset(&val_idx);
    let mut train = data.subset(&train_idx);
    let eval_set = if val.is_empty() { train.clone() } else { val };
    if cfg.augment {
        train = train.dihedral(params.config.height, params.config.width);
    }
    let data = &train;
    let train_idx: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(&params);
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, params.clone());
    let mut since_best = 0usize;
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch).enumerate() {
            params.power_iterate(cfg.power_iters);
            let (loss, grads) = batch_gradients(&params, data, batch, cfg.loss_weights)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step: epoch * order.len().div_ceil(cfg.batch) + step,
                    detail: format!("non-finite loss {loss} in epoch {epoch}"),
                });
            }
            adam.step(&mut params, &grads, cfg.lr, cfg.weight_decay);
            sum += loss * batch.len() as f64;
        }
        let train_loss = sum / order.len() as f64;
        let val_loss = dataset_loss(&params, &eval_set, cfg.loss_weights)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                step: epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        log::info!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        history.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, params.clone());
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    let params = if history.best_epoch.is_some() { best.1 } else { params };
    Ok((params, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean unweighted Minkowski loss per sample.
    pub m: f64,
    /// Pooled over every log-space entry.
    pub r2: f64,
    pub r2_a: f64,
    pub r2_p: f64,
    pub r2_cc: f64,
    /// Fraction of (sample, level) pairs with `P^2 < 4 pi A`.
    pub nu_iso: f64,
    /// Fraction of samples with at least one violating level.
    pub nu_iso_sample: f64,
    /// Fraction of samples whose area curve increases somewhere.
    pub monotonicity_violations: f64,
    pub n: usize,
}

/// `1 - SS_res / SS_tot`.
pub fn r2_score(pred: &[f64], truth: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, y)| (p - y).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Metrics of predictions against targets, in `log1p` space.
pub fn metrics_from_predictions(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Metrics> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::InvalidArgument("need matching, non-empty predictions".into()));
    }
    let lg = |v: f64| v.max(0.0).ln_1p();
    let mut comp_p: [Vec<f64>; 3] = Default::default();
    let mut comp_t: [Vec<f64>; 3] = Default::default();
    let (mut m, mut bad, mut levels, mut bad_samples, mut nonmono) = (0.0, 0, 0, 0, 0);
    for (p, g) in preds.iter().zip(targets) {
        if p.len() != g.len() || g.len() % 3 != 0 {
            return Err(Error::InvalidArgument("prediction length mismatch".into()));
        }
        let mut sample_bad = false;
        for (i, (a, b)) in p.iter().zip(g).enumerate() {
            comp_p[i % 3].push(lg(*a));
            comp_t[i % 3].push(lg(*b));
            m += (lg(*a) - lg(*b)).abs();
        }
        for lvl in 0..g.len() / 3 {
            levels += 1;
            let (a, per) = (p[3 * lvl], p[3 * lvl + 1]);
            if a < 0.0 || per < 0.0 || isoperimetric_violation(a, per) {
                bad += 1;
                sample_bad = true;
            }
        }
        bad_samples += sample_bad as usize;
        let areas: Vec<f64> = p.iter().step_by(3).copied().collect();
        nonmono += areas.windows(2).any(|w| w[1] > w[0]) as usize;
    }
    let all_p: Vec<f64> = comp_p.iter().flatten().copied().collect();
    let all_t: Vec<f64> = comp_t.iter().flatten().copied().collect();
    let n = preds.len();
    Ok(Metrics {
        m: m / n as f64,
        r2: r2_score(&all_p, &all_t),
        r2_a: r2_score(&comp_p[0], &comp_t[0]),
        r2_p: r2_score(&comp_p[1], &comp_t[1]),
        r2_cc: r2_score(&comp_p[2], &comp_t[2]),
        nu_iso: bad as f64 / levels as f64,
        nu_iso_sample: bad_samples as f64 / n as f64,
        monotonicity_violations: nonmono as f64 / n as f64,
        n,
    })
}

pub fn evaluate(params: &EmulatorParams, data: &Dataset) -> Result<Metrics> {
    let preds = params.predict_batch(&data.inputs)?;
    metrics_from_predictions(&preds, &data.targets)
}

/// Largest `|z(x) - z(y)| / |x - y|` of the backbone latent over random
/// input pairs, and the input-layer norm that bounds it.
pub fn lipschitz_probe(params: &EmulatorParams, n_pairs: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.config.n_inputs();
    let mut worst: f64 = 0.0;
    let mut t = Tape::new();
    let b = params.bind(&mut t, false)?;
    let base = t.len();
    for _ in 0..n_pairs {
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let xv = t.constant(x.clone(), Shape::Vector(n))?;
        let zx = params.latent_bound(&mut t, &b, xv)?;
        let yv = t.constant(y.clone(), Shape::Vector(n))?;
        let zy = params.latent_bound(&mut t, &b, yv)?;
        let dz: Vec<f64> = t.value(zx).iter().zip(t.value(zy)).map(|(a, c)| a - c).collect();
        let dx: Vec<f64> = x.iter().zip(&y).map(|(a, c)| a - c).collect();
        worst = worst.max(norm2(&dz) / norm2(&dx));
        t.truncate(base);
    }
    Ok((worst, params.input_layer_norm()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerEntry {
    file: String,
    rows: usize,
    cols: usize,
    normalize: bool,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    magic: String,
    config: EmulatorConfig,
    norm: NormalizationSpec,
    layers: Vec<LayerEntry>,
}

/// Write a checkpoint directory: `checkpoint.json` plus one blob per layer
/// holding weight, bias and `u` as f64 LE.
pub fn save_checkpoint(params: &EmulatorParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (k, l) in params.layers.iter().enumerate() {
        let mut bytes = Vec::with_capacity(8 * (l.weight.len() + 2 * l.rows));
        for v in l.weight.iter().chain(&l.bias).chain(&l.u) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let file = format!("layer_{k:02}.bin");
        fs::write(dir.join(&file), &bytes)?;
        entries.push(LayerEntry {
            file,
            rows: l.rows,
            cols: l.cols,
            normalize: l.normalize,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = CheckpointManifest {
        magic: CHECKPOINT_MAGIC.into(),
        config: params.config.clone(),
        norm: params.norm,
        layers: entries,
    };
    fs::write(dir.join("checkpoint.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<EmulatorParams> {
    let path = dir.join("checkpoint.json");
    let bad = |m: String| Error::CorruptCheckpoint(format!("{}: {m}", dir.display()));
    let text = fs::read(&path).map_err(|e| bad(e.to_string()))?;
    let man: CheckpointManifest =
        serde_json::from_slice(&text).map_err(|e| bad(e.to_string()))?;
    if man.magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(path));
    }
    let mut layers = Vec::with_capacity(man.layers.len());
    for e in &man.layers {
        let bytes = fs::read(dir.join(&e.file)).map_err(|x| bad(x.to_string()))?;
        if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
            return Err(bad(format!("checksum mismatch in {}", e.file)));
        }
        let need = 8 * (e.rows * e.cols + 2 * e.rows);
        if bytes.len() != need {
            return Err(bad(format!("{} has {} bytes, expected {need}", e.file, bytes.len())));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let wn = e.rows * e.cols;
        layers.push(SpectralLinear {
            rows: e.rows,
            cols: e.cols,
            weight: vals[..wn].to_vec(),
            bias: vals[wn..wn + e.rows].to_vec(),
            u: vals[wn + e.rows..].to_vec(),
            normalize: e.normalize,
        });
    }
    let params = EmulatorParams {
        config: man.config,
        norm: man.norm,
        layers,
    };
    let expected = EmulatorParams::init(params.config.clone(), params.norm, 0)?;
    let shapes = |p: &EmulatorParams| -> Vec<(usize, usize, bool)> {
        p.layers.iter().map(|l| (l.rows, l.cols, l.normalize)).collect()
    };
    if shapes(&expected) != shapes(&params) {
        return Err(bad("layer shapes do not match the configuration".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::relative_error;

    fn small(arch: Arch, n_levels: usize, seed: u64) -> EmulatorParams {
        let mut cfg = EmulatorConfig::new(arch, 6, 5, n_levels, 2.0);
        cfg.hidden = 12;
        EmulatorParams::init(cfg, NormalizationSpec::new(0.1, 3.0).unwrap(), seed).unwrap()
    }

    fn randomize(p: &mut EmulatorParams, rng: &mut ChaCha8Rng, scale: f64) {
        for l in &mut p.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                let z: f64 = StandardNormal.sample(rng);
                *w = scale * z;
            }
        }
    }

    #[test]
    fn spectral_examples() {
        let n = 4;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 3.0;
        }
        let mut l = SpectralLinear::from_weight(n, n, w, true);
        let eff = spectral_normalize(&mut l, 20).unwrap();
        assert!((l.sigma() - 3.0).abs() < 1e-9);
        for i in 0..n {
            assert!((eff[i * n + i] - 1.0).abs() < 1e-9);
        }
        let mut l = SpectralLinear::from_weight(2, 2, vec![5.0, 0.0, 0.0, 1.0], true);
        l.power_iterate(50);
        assert!((l.sigma() - 5.0).abs() < 1e-3);
        let mut z = SpectralLinear::from_weight(2, 3, vec![0.0; 6], true);
        let eff = spectral_normalize(&mut z, 1).unwrap();
        assert!(eff.iter().all(|v| v.is_finite()));
        assert!(spectral_normalize(&mut z, 0).is_err());
    }

    #[test]
    fn normalized_layers_have_unit_norm_after_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = SpectralLinear::init(20, 30, true, &mut rng);
        l.power_iterate(200);
        let eff = l.effective_weight();
        assert!(spectral_norm(20, 30, &eff) <= 1.0 + 1e-3);
    }

    #[test]
    fn area_head_examples() {
        let mut t = Tape::new();
        let logits = t.var(vec![0.3; 5], Shape::Vector(5)).unwrap();
        // softplus(raw) * cap = 100
        let raw = t.var(vec![(100f64 / 10.0).exp_m1().ln()], Shape::Vector(1)).unwrap();
        let a = head_area(&mut t, logits, raw, 10.0).unwrap();
        let got = t.value(a).to_vec();
        for (g, e) in got.iter().zip([80.0, 60.0, 40.0, 20.0]) {
            assert!((g - e).abs() < 1e-9, "{got:?}");
        }
        let raw = t.var(vec![-800.0], Shape::Vector(1)).unwrap();
        let a = head_area(&mut t, logits, raw, 10.0).unwrap();
        assert!(t.value(a).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perimeter_and_count_heads() {
        let mut t = Tape::new();
        let a = t.var(vec![PI, 0.0], Shape::Vector(2)).unwrap();
        let r = t.var(vec![-800.0, 1.0], Shape::Vector(2)).unwrap();
        let p = head_perimeter(&mut t, a, r).unwrap();
        assert!((t.value(p)[0] - 2.0 * PI * (1.0 + ISO_MARGIN)).abs() < 1e-12);
        assert!(t.value(p)[0].powi(2) > 4.0 * PI * PI);
        assert_eq!(t.value(p)[1], 0.0);
        let raw = t.var(vec![0.0, -20.0], Shape::Vector(2)).unwrap();
        let c = head_counts(&mut t, raw);
        assert!((t.value(c)[0] - 2f64.ln()).abs() < 1e-15);
        assert!(t.value(c)[1] > 0.0 && t.value(c)[1] < 3e-9);
        let s = t.sum(c);
        let g = t.backward(s).unwrap().wrt(raw);
        assert!(g.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn constrained_heads_hold_for_random_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut p = small(Arch::Constrained, 5, 0);
        for draw in 0..1000 {
            randomize(&mut p, &mut rng, if draw % 2 == 0 { 0.5 } else { 5.0 });
            let x: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g = p.predict(&x).unwrap();
            for lvl in 0..5 {
                let (a, per, cc) = (g[3 * lvl], g[3 * lvl + 1], g[3 * lvl + 2]);
                assert!(a >= 0.0 && cc > 0.0);
                assert!(!isoperimetric_violation(a, per));
                if lvl > 0 {
                    assert!(a <= g[3 * (lvl - 1)]);
                }
            }
        }
    }

    #[test]
    fn loss_examples_and_metric_axioms() {
        assert_eq!(minkowski_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], [1.0; 3]).unwrap(), 0.0);
        let l = minkowski_loss(&[1f64.exp() - 1.0, 0.0, 0.0], &[0.0; 3], [1.0; 3]).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        assert!(minkowski_loss(&[-1.0, 0.0, 0.0], &[0.0; 3], [1.0; 3]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let mut r = || (0..6).map(|_| rng.random_range(0.0..100.0)).collect::<Vec<f64>>();
            let (a, b, c) = (r(), r(), r());
            let w = DEFAULT_LOSS_WEIGHTS;
            let ab = minkowski_loss(&a, &b, w).unwrap();
            assert!(ab > 0.0);
            assert_eq!(ab, minkowski_loss(&b, &a, w).unwrap());
            let ac = minkowski_loss(&a, &c, w).unwrap();
            let cb = minkowski_loss(&c, &b, w).unwrap();
            assert!(ab <= ac + cb + 1e-12);
        }
    }

    #[test]
    fn trust_examples() {
        assert_eq!(trust_weight(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 0.005725).unwrap(), 1.0);
        let mse = -(0.1f64.ln()) / 0.005725;
        assert!((mse - 402.18).abs() < 0.02);
        assert!((calibrate_tau_from_errors(&[402.18; 10]).unwrap() - 0.005725).abs() < 1e-6);
        assert!((trust_weight_from_mse(mse, 0.005725) - 0.1).abs() < 1e-12);
        let ws: Vec<f64> = (0..10).map(|k| trust_weight_from_mse(k as f64, 0.1)).collect();
        assert!(ws.windows(2).all(|w| w[1] < w[0]));
        let tau = calibrate_tau_from_errors(&[3.0; 7]).unwrap();
        assert!((tau + 0.1f64.ln() / 3.0).abs() < 1e-15);
        assert!(calibrate_tau_from_errors(&[]).is_err());
        assert!(trust_weight(&[0.0; 3], &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn r2_definitions() {
        let y = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r2_score(&y, &y), 1.0);
        assert!(r2_score(&[3.5; 4], &y).abs() < 1e-15);
        let g = vec![vec![10.0, 12.0, 1.0], vec![3.0, 7.0, 2.0]];
        let m = metrics_from_predictions(&g, &g).unwrap();
        assert_eq!((m.r2, m.m), (1.0, 0.0));
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        for arch in [Arch::Constrained, Arch::Unconstrained, Arch::Nosn] {
            let p = small(arch, 3, 9);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x0: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
            let target: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..50.0)).collect();
            let f = |x: &[f64]| {
                let mut t = Tape::new();
                let xv = t.var(x.to_vec(), Shape::Vector(30)).unwrap();
                let (_, feats) = p.forward_both(&mut t, xv).unwrap();
                let l = feature_loss(&mut t, feats, &target, DEFAULT_LOSS_WEIGHTS).unwrap();
                (t.scalar_value(l), t.backward(l).unwrap().wrt(xv))
            };
            let (_, g) = f(&x0);
            let h = 1e-6;
            let fd: Vec<f64> = (0..30)
                .map(|i| {
                    let (mut a, mut b) = (x0.clone(), x0.clone());
                    a[i] += h;
                    b[i] -= h;
                    (f(&a).0 - f(&b).0) / (2.0 * h)
                })
                .collect();
            assert!(relative_error(&g, &fd) < 1e-5, "{arch:?}");
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut p = small(Arch::Constrained, 2, 3);
        p.power_iterate(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Dataset {
            inputs: (0..3).map(|_| (0..30).map(|_| rng.random::<f64>()).collect()).collect(),
            targets: (0..3).map(|_| (0..6).map(|_| rng.random_range(0.0..20.0)).collect()).collect(),
        };
        let idx = [0, 1, 2];
        let (_, grads) = batch_gradients(&p, &data, &idx, DEFAULT_LOSS_WEIGHTS).unwrap();
        // spot-check a normalized block weight and a head bias
        for (layer, is_w, k) in [(1usize, true, 7usize), (4, false, 1), (0, true, 40)] {
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut q = p.clone();
                let target = if is_w { &mut q.layers[layer].weight } else { &mut q.layers[layer].bias };
                target[k] += delta;
                batch_gradients(&q, &data, &idx, DEFAULT_LOSS_WEIGHTS).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[2 * layer + (!is_w) as usize][k];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1e-3), "{layer} {fd} {an}");
        }
    }

    #[test]
    fn overfit_one_batch_decreases_loss() {
        let p = small(Arch::Constrained, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = Dataset {
            inputs: (0..8).map(|_| (0..30).map(|_| rng.random::<f64>()).collect()).collect(),
            targets: (0..8)
                .map(|_| {
                    let a = rng.random_range(10.0..100.0);
                    vec![a, 40.0, 2.0, a / 2.0, 30.0, 1.0, a / 4.0, 20.0, 1.0]
                })
                .collect(),
        };
        let cfg = TrainConfig {
            batch: 8,
            epochs: 3,
            val_fraction: 0.0,
            augment: false,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let (_, hist) = train_emulator(p, &data, &cfg).unwrap();
        let l: Vec<f64> = hist.epochs.iter().map(|e| e.train_loss).collect();
        assert!(l.windows(2).all(|w| w[1] < w[0]), "{l:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Dataset {
            inputs: (0..20).map(|_| (0..30).map(|_| rng.random::<f64>()).collect()).collect(),
            targets: (0..20).map(|_| (0..6).map(|_| rng.random_range(0.0..50.0)).collect()).collect(),
        };
        let cfg = TrainConfig {
            batch: 4,
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train_emulator(small(Arch::Unconstrained, 2, 1), &data, &cfg).unwrap();
        let b = train_emulator(small(Arch::Unconstrained, 2, 1), &data, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn divergence_is_reported() {
        let mut p = small(Arch::Nosn, 2, 1);
        p.layers[0].weight[0] = f64::NAN;
        let data = Dataset {
            inputs: vec![vec![0.5; 30]; 4],
            targets: vec![vec![1.0; 6]; 4],
        };
        let err = train_emulator(p, &data, &TrainConfig::default()).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn lipschitz_bound_holds_at_init() {
        let p = small(Arch::Constrained, 3, 5);
        let (ratio, k) = lipschitz_probe(&p, 500, 1).unwrap();
        assert!(ratio <= 1.05 * k, "{ratio} {k}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = small(Arch::Constrained, 3, 8);
        save_checkpoint(&p, dir.path()).unwrap();
        let q = load_checkpoint(dir.path()).unwrap();
        assert_eq!(p, q);
        let blob = dir.path().join("layer_01.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 0x40;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptCheckpoint(_))));
        let man = dir.path().join("checkpoint.json");
        let text = fs::read_to_string(&man).unwrap().replace("MGEMU01", "MGEMU99");
        fs::write(&man, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::BadMagic(_))));
    }

    #[test]
    fn dihedral_copies_are_distinct_symmetries() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let d = Dataset {
            inputs: vec![x.clone()],
            targets: vec![vec![1.0, 2.0, 3.0]],
        }
        .dihedral(3, 3);
        assert_eq!(d.len(), 8);
        assert_eq!(d.inputs[0], x);
        let mut uniq = d.inputs.clone();
        uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
        for y in &d.inputs {
            assert_eq!(y[4], 4.0);
            let mut s = y.clone();
            s.sort_by(f64::total_cmp);
            assert_eq!(s, x);
        }
        assert_eq!(Dataset { inputs: vec![vec![0.0; 6]], targets: vec![vec![0.0; 3]] }.dihedral(2, 3).len(), 4);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(100, 0.2, 4);
        assert_eq!((a.len(), b.len()), (80, 20));
        assert_eq!(split_indices(100, 0.2, 4), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
