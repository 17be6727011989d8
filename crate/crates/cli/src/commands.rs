use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use minkgeo::analytic::{Anneal, SoftGeomConfig, DEFAULT_PERSISTENCE_DELTA_MMH, DEFAULT_TAU, DEFAULT_TAU_MASK};
use minkgeo::diagnostics::{
    self, invert as run_inversion, DataTerm, ExactSpec, InversionConfig, Surrogate,
};
use minkgeo::emulator::{
    evaluate, lipschitz_probe, load_checkpoint, save_checkpoint, train_emulator, Arch, Dataset,
    EmulatorConfig, EmulatorParams, TrainConfig,
};
use minkgeo::geometry::steiner_check;
use minkgeo::grid::{
    block_bilinear_interp, gen_multipeak_gaussian, mixup, normalize, read_raster, write_raster,
    MixupConfig, MultipeakConfig, DEFAULT_DRIZZLE_THRESHOLD,
};
use minkgeo::persistence::{DEFAULT_INFINITE_CUTOFF, DEFAULT_PERSISTENCE_EPSILON};
use minkgeo::targets::{
    calibrate_thresholds, gamma_exact, generate_targets, list_rasters, GammaStore, GammaVector,
    TargetOptions, ThresholdSpec, DEFAULT_QUANTILE_LEVELS, DEFAULT_SAMPLE_CAP,
};
use minkgeo::{Field2D, NormalizationSpec, Units};

use crate::config::{resolve, write_manifest, write_resolved};
use crate::CliError;

type Res<T> = Result<T, CliError>;

pub struct Ctx {
    pub config: Option<PathBuf>,
    pub workers: Option<usize>,
}

fn finite(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s} is not a finite number"))
    }
}

fn need<T: Clone>(v: &Option<T>, name: &str) -> Res<T> {
    v.clone().ok_or_else(|| CliError::validation(format!("missing required setting `{name}`")))
}

fn seed_for(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

fn load_corpus(dir: &Path) -> Res<Vec<Field2D>> {
    if !dir.is_dir() {
        return Err(CliError::validation(format!("corpus {} is not a directory", dir.display())));
    }
    let paths = list_rasters(dir)?;
    if paths.is_empty() {
        return Err(CliError::validation(format!("no rasters in {}", dir.display())));
    }
    paths.iter().map(read_field).collect()
}

fn read_field(p: impl AsRef<Path>) -> Res<Field2D> {
    let p = p.as_ref();
    read_raster(p).map_err(|e| {
        let e = CliError::from(e);
        CliError { msg: format!("{}: {}", p.display(), e.msg), ..e }
    })
}

fn finish<T: Serialize>(dir: &Path, command: &str, settings: &T) -> Res<()> {
    write_resolved(dir, command, settings)?;
    write_manifest(dir)
}

fn to_json<T: Serialize>(v: &T) -> Res<Value> {
    serde_json::to_value(v).map_err(CliError::internal)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Res<()> {
    fs::write(path, serde_json::to_vec_pretty(v).map_err(CliError::internal)?)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: ThresholdSpec,
    pub normalization: NormalizationSpec,
    pub n_fields: usize,
}

fn load_calibration(path: &Path) -> Res<Calibration> {
    let text = fs::read(path)
        .map_err(|e| CliError::validation(format!("calibration {}: {e}", path.display())))?;
    let c: Calibration = serde_json::from_slice(&text)
        .map_err(|e| CliError::validation(format!("calibration {}: {e}", path.display())))?;
    c.thresholds.validate()?;
    c.normalization.validate()?;
    Ok(c)
}

// ---------------------------------------------------------------- gen-synthetic

#[derive(Debug, Args, Serialize)]
pub struct GenSyntheticArgs {
    /// Output directory for the rasters.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of fields.
    #[arg(long)]
    n: Option<usize>,
    /// Base seed; field i uses a seed derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Grid rows, pixels.
    #[arg(long)]
    height: Option<usize>,
    /// Grid columns, pixels.
    #[arg(long)]
    width: Option<usize>,
    /// Gaussian peaks per field.
    #[arg(long)]
    n_peaks: Option<usize>,
    /// Smallest peak amplitude, mm/h.
    #[arg(long, value_parser = finite)]
    amp_min: Option<f64>,
    /// Largest peak amplitude, mm/h.
    #[arg(long, value_parser = finite)]
    amp_max: Option<f64>,
    /// Smallest peak width, pixels.
    #[arg(long, value_parser = finite)]
    sigma_min: Option<f64>,
    /// Largest peak width, pixels.
    #[arg(long, value_parser = finite)]
    sigma_max: Option<f64>,
    /// Pixel edge length, km.
    #[arg(long, value_parser = finite)]
    pixel_size: Option<f64>,
    /// Mix each field with its noisy coarsened copy.
    #[arg(long)]
    mixup: Option<bool>,
    /// Beta(alpha, alpha) concentration of the mix-up weight (dimensionless).
    #[arg(long, value_parser = finite)]
    mixup_alpha: Option<f64>,
    /// Mix-up noise standard deviation, mm/h.
    #[arg(long, value_parser = finite)]
    mixup_noise: Option<f64>,
    /// Coarsening block of the mix-up partner, pixels.
    #[arg(long)]
    mixup_factor: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSyntheticSettings {
    out: Option<PathBuf>,
    n: usize,
    seed: u64,
    height: usize,
    width: usize,
    n_peaks: usize,
    amp_min: f64,
    amp_max: f64,
    sigma_min: f64,
    sigma_max: f64,
    pixel_size: f64,
    mixup: bool,
    mixup_alpha: f64,
    mixup_noise: f64,
    mixup_factor: usize,
}

impl Default for GenSyntheticSettings {
    fn default() -> Self {
        let m = MultipeakConfig::default();
        let x = MixupConfig::default();
        Self {
            out: None,
            n: 100,
            seed: 0,
            height: m.height,
            width: m.width,
            n_peaks: m.n_peaks,
            amp_min: m.amp_range.0,
            amp_max: m.amp_range.1,
            sigma_min: m.sigma_range.0,
            sigma_max: m.sigma_range.1,
            pixel_size: m.pixel_size,
            mixup: false,
            mixup_alpha: x.alpha,
            mixup_noise: x.noise_sigma,
            mixup_factor: x.interp_factor,
        }
    }
}

pub fn gen_synthetic(ctx: &Ctx, args: GenSyntheticArgs) -> Res<Value> {
    let s: GenSyntheticSettings = resolve("gen-synthetic", ctx.config.as_deref(), &args)?;
    let out = need(&s.out, "out")?;
    if s.n == 0 {
        return Err(CliError::validation("n must be >= 1"));
    }
    let cfg = MultipeakConfig {
        height: s.height,
        width: s.width,
        n_peaks: s.n_peaks,
        amp_range: (s.amp_min, s.amp_max),
        sigma_range: (s.sigma_min, s.sigma_max),
        pixel_size: s.pixel_size,
    };
    let fields = (0..s.n)
        .into_par_iter()
        .map(|i| {
            let seed = seed_for(s.seed, i);
            let f = gen_multipeak_gaussian(seed, &cfg)?;
            if s.mixup {
                let partner = block_bilinear_interp(&f, s.mixup_factor)?;
                mixup(&f, &partner, s.mixup_alpha, s.mixup_noise, seed)
            } else {
                Ok(f)
            }
        })
        .collect::<minkgeo::Result<Vec<Field2D>>>()?;
    fs::create_dir_all(&out)?;
    for old in list_rasters(&out)? {
        fs::remove_file(old)?;
    }
    for (i, f) in fields.iter().enumerate() {
        write_raster(f, out.join(format!("field_{i:05}.mgf")))?;
    }
    finish(&out, "gen-synthetic", &s)?;
    let peak = fields.iter().map(|f| f.max()).fold(0.0, f64::max);
    Ok(json!({ "command": "gen-synthetic", "out": out, "n": s.n, "max_intensity_mmh": peak }))
}

// -------------------------------------------------------------------- calibrate

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Directory of rasters (mm/h).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory; receives calibration.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Quantile levels in (0, 1), comma separated.
    #[arg(long, value_delimiter = ',', value_parser = finite)]
    levels: Option<Vec<f64>>,
    /// Reservoir size, pixels.
    #[arg(long)]
    cap: Option<usize>,
    /// Pixels at or below this intensity are dry, mm/h.
    #[arg(long, value_parser = finite)]
    drizzle: Option<f64>,
    /// Reservoir sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSettings {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    levels: Vec<f64>,
    cap: usize,
    drizzle: f64,
    seed: u64,
}

impl Default for CalibrateSettings {
    fn default() -> Self {
        Self {
            corpus: None,
            out: None,
            levels: DEFAULT_QUANTILE_LEVELS.to_vec(),
            cap: DEFAULT_SAMPLE_CAP,
            drizzle: DEFAULT_DRIZZLE_THRESHOLD,
            seed: 0,
        }
    }
}

pub fn calibrate(ctx: &Ctx, args: CalibrateArgs) -> Res<Value> {
    let s: CalibrateSettings = resolve("calibrate", ctx.config.as_deref(), &args)?;
    let corpus = need(&s.corpus, "corpus")?;
    let out = need(&s.out, "out")?;
    let fields = load_corpus(&corpus)?;
    let spec = calibrate_thresholds(fields.iter(), &s.levels, s.cap, s.drizzle, s.seed)?;
    let norm = NormalizationSpec::fit(s.drizzle, fields.iter())?;
    let c = Calibration {
        thresholds: spec,
        normalization: norm,
        n_fields: fields.len(),
    };
    fs::create_dir_all(&out)?;
    write_json(&out.join("calibration.json"), &c)?;
    finish(&out, "calibrate", &s)?;
    Ok(json!({
        "command": "calibrate",
        "out": out,
        "n_fields": c.n_fields,
        "thresholds_mmh": c.thresholds.physical_thresholds,
        "log_scale": c.normalization.log_scale,
    }))
}

// ------------------------------------------------------------------ gen-targets

#[derive(Debug, Args, Serialize)]
pub struct GenTargetsArgs {
    /// Directory of rasters (mm/h).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Store directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// calibration.json from `calibrate`; overrides --levels.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Fixed thresholds, mm/h, comma separated; overrides --levels.
    #[arg(long, value_delimiter = ',', value_parser = finite)]
    thresholds: Option<Vec<f64>>,
    /// Quantile levels in (0, 1) calibrated on the corpus itself.
    #[arg(long, value_delimiter = ',', value_parser = finite)]
    levels: Option<Vec<f64>>,
    /// Calibration reservoir size, pixels.
    #[arg(long)]
    cap: Option<usize>,
    /// Calibration drizzle floor, mm/h.
    #[arg(long, value_parser = finite)]
    drizzle: Option<f64>,
    /// Calibration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Minimum component lifetime, mm/h.
    #[arg(long, value_parser = finite)]
    epsilon: Option<f64>,
    /// The global component counts only at thresholds up to this, mm/h.
    #[arg(long, value_parser = finite)]
    cutoff: Option<f64>,
    /// Also record hole counts.
    #[arg(long)]
    with_holes: Option<bool>,
    #[arg(skip)]
    workers: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenTargetsSettings {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    calibration: Option<PathBuf>,
    thresholds: Option<Vec<f64>>,
    levels: Vec<f64>,
    cap: usize,
    drizzle: f64,
    seed: u64,
    epsilon: f64,
    cutoff: f64,
    with_holes: bool,
    workers: usize,
}

impl Default for GenTargetsSettings {
    fn default() -> Self {
        let c = CalibrateSettings::default();
        Self {
            corpus: None,
            out: None,
            calibration: None,
            thresholds: None,
            levels: c.levels,
            cap: c.cap,
            drizzle: c.drizzle,
            seed: 0,
            epsilon: DEFAULT_PERSISTENCE_EPSILON,
            cutoff: DEFAULT_INFINITE_CUTOFF,
            with_holes: false,
            workers: 1,
        }
    }
}

pub fn gen_targets(ctx: &Ctx, mut args: GenTargetsArgs) -> Res<Value> {
    args.workers = ctx.workers;
    let s: GenTargetsSettings = resolve("gen-targets", ctx.config.as_deref(), &args)?;
    let corpus = need(&s.corpus, "corpus")?;
    let out = need(&s.out, "out")?;
    if !corpus.is_dir() {
        return Err(CliError::validation(format!("corpus {} is not a directory", corpus.display())));
    }
    let spec = if let Some(c) = &s.calibration {
        load_calibration(c)?.thresholds
    } else if let Some(t) = &s.thresholds {
        ThresholdSpec {
            drizzle_threshold: s.drizzle,
            ..ThresholdSpec::fixed(t.clone())?
        }
    } else {
        let fields = load_corpus(&corpus)?;
        calibrate_thresholds(fields.iter(), &s.levels, s.cap, s.drizzle, s.seed)?
    };
    let opts = TargetOptions {
        epsilon: s.epsilon,
        infinite_cutoff: s.cutoff,
        with_holes: s.with_holes,
        workers: s.workers,
    };
    let summary = generate_targets(&corpus, &out, &spec, &opts)?;
    write_resolved(&out, "gen-targets", &s)?;
    let mut v = to_json(&summary)?;
    v["command"] = json!("gen-targets");
    v["out"] = json!(out);
    v["thresholds_mmh"] = json!(spec.physical_thresholds);
    Ok(v)
}

// --------------------------------------------------------------- train-emulator

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Architecture.
    #[arg(long, value_parser = ["constrained", "unconstrained", "nosn"])]
    arch: Option<String>,
    /// Target store from `gen-targets`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training epochs; 0 writes the initialized network.
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam step size (dimensionless).
    #[arg(long, value_parser = finite)]
    lr: Option<f64>,
    /// L2 weight decay (dimensionless).
    #[arg(long, value_parser = finite)]
    weight_decay: Option<f64>,
    /// Minibatch size, fields.
    #[arg(long)]
    batch: Option<usize>,
    /// Initialization and shuffling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Early-stopping patience, epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Held-out fraction for early stopping, in [0, 1).
    #[arg(long, value_parser = finite)]
    val_fraction: Option<f64>,
    /// Power iterations per step for spectral normalization.
    #[arg(long)]
    power_iters: Option<usize>,
    /// Train on all flips and rotations.
    #[arg(long)]
    augment: Option<bool>,
    /// Hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Residual blocks.
    #[arg(long)]
    blocks: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    arch: Arch,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    batch: usize,
    seed: u64,
    patience: usize,
    val_fraction: f64,
    power_iters: usize,
    augment: bool,
    hidden: usize,
    blocks: usize,
    loss_weights: [f64; 3],
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            arch: Arch::Constrained,
            data: None,
            out: None,
            epochs: t.epochs,
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch: t.batch,
            seed: t.seed,
            patience: t.patience,
            val_fraction: t.val_fraction,
            power_iters: t.power_iters,
            augment: t.augment,
            hidden: 128,
            blocks: 2,
            loss_weights: t.loss_weights,
        }
    }
}

fn load_store_fields(store: &GammaStore) -> Res<Vec<Field2D>> {
    store
        .field_paths()
        .iter()
        .map(|p| {
            read_raster(p).map_err(|e| CliError::validation(format!("store field {}: {e}", p.display())))
        })
        .collect()
}

fn open_store(path: &Path) -> Res<(GammaStore, Vec<Field2D>)> {
    let store = GammaStore::open(path)?;
    if store.rows.is_empty() {
        return Err(CliError::validation("target store is empty"));
    }
    let fields = load_store_fields(&store)?;
    Ok((store, fields))
}

fn targets_of(store: &GammaStore) -> Vec<Vec<f64>> {
    store.rows.iter().map(|g| g.entries.clone()).collect()
}

pub fn train(ctx: &Ctx, args: TrainArgs) -> Res<Value> {
    let s: TrainSettings = resolve("train-emulator", ctx.config.as_deref(), &args)?;
    let data = need(&s.data, "data")?;
    let out = need(&s.out, "out")?;
    let (store, fields) = open_store(&data)?;
    let norm = NormalizationSpec::fit(store.manifest.spec.drizzle_threshold, fields.iter())?;
    let f0 = &fields[0];
    let config = EmulatorConfig {
        hidden: s.hidden,
        n_blocks: s.blocks,
        ..EmulatorConfig::new(s.arch, f0.height(), f0.width(), store.manifest.n_levels, f0.pixel_size())
    };
    let params = EmulatorParams::init(config, norm, s.seed)?;
    let ds = Dataset::from_fields(&fields, &targets_of(&store), &norm)?;
    let tc = TrainConfig {
        lr: s.lr,
        weight_decay: s.weight_decay,
        batch: s.batch,
        epochs: s.epochs,
        loss_weights: s.loss_weights,
        seed: s.seed,
        patience: s.patience,
        val_fraction: s.val_fraction,
        power_iters: s.power_iters,
        augment: s.augment,
    };
    let (params, history) = train_emulator(params, &ds, &tc)?;
    save_checkpoint(&params, &out)?;
    write_json(&out.join("history.json"), &history)?;
    finish(&out, "train-emulator", &s)?;
    let best = history.best_epoch.map(|e| history.epochs[e].val_loss);
    Ok(json!({
        "command": "train-emulator",
        "out": out,
        "arch": s.arch,
        "n_fields": ds.len(),
        "n_params": params.n_params(),
        "epochs_run": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "best_val_loss": best,
        "stopped_early": history.stopped_early,
    }))
}

// ---------------------------------------------------------------- eval-emulator

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Target store from `gen-targets`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Optional output directory for metrics.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random input pairs (count) for the Lipschitz probe; 0 skips it.
    #[arg(long)]
    lipschitz_pairs: Option<usize>,
    /// Seed of the Lipschitz probe.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    lipschitz_pairs: usize,
    seed: u64,
}

pub fn eval(ctx: &Ctx, args: EvalArgs) -> Res<Value> {
    let s: EvalSettings = resolve("eval-emulator", ctx.config.as_deref(), &args)?;
    let params = load_checkpoint(&need(&s.ckpt, "ckpt")?)?;
    let (store, fields) = open_store(&need(&s.data, "data")?)?;
    if store.manifest.n_levels != params.config.n_levels {
        return Err(CliError::validation(format!(
            "store has {} levels, checkpoint {}",
            store.manifest.n_levels, params.config.n_levels
        )));
    }
    let ds = Dataset::from_fields(&fields, &targets_of(&store), &params.norm)?;
    let metrics = evaluate(&params, &ds)?;
    let mut v = to_json(&metrics)?;
    if s.lipschitz_pairs > 0 {
        let (ratio, bound) = lipschitz_probe(&params, s.lipschitz_pairs, s.seed)?;
        v["lipschitz_ratio"] = json!(ratio);
        v["lipschitz_bound"] = json!(bound);
    }
    v["command"] = json!("eval-emulator");
    v["arch"] = json!(params.config.arch);
    if let Some(out) = &s.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("metrics.json"), &v)?;
        finish(out, "eval-emulator", &s)?;
    }
    Ok(v)
}

// ------------------------------------------------------------ surrogate set-up

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    Analytic,
    Emulator,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyticArgs {
    /// Sigmoid temperature, normalized intensity units.
    #[arg(long, value_parser = finite)]
    tau: Option<f64>,
    /// Persistence-mask temperature, normalized intensity units.
    #[arg(long, value_parser = finite)]
    tau_mask: Option<f64>,
    /// Persistence floor, mm/h.
    #[arg(long, value_parser = finite)]
    delta: Option<f64>,
    /// Soft thresholds, mm/h, comma separated; default from --calibration.
    #[arg(long, value_delimiter = ',', value_parser = finite)]
    thresholds: Option<Vec<f64>>,
    /// Per-step geometric temperature decay (dimensionless, in (0, 1]).
    #[arg(long, value_parser = finite)]
    anneal_ratio: Option<f64>,
    /// Temperature floor of the schedule, normalized intensity units.
    #[arg(long, value_parser = finite)]
    anneal_floor: Option<f64>,
    /// Apply the 3x3 morphological opening.
    #[arg(long)]
    morph_filter: Option<bool>,
    /// Log scale S of the normalization `log(1 + x) / S`; default from --calibration.
    #[arg(long, value_parser = finite)]
    log_scale: Option<f64>,
    /// Drizzle floor of the normalization, mm/h.
    #[arg(long, value_parser = finite)]
    drizzle: Option<f64>,
    /// Pixel edge length, km.
    #[arg(long, value_parser = finite)]
    pixel_size: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticSettings {
    tau: f64,
    tau_mask: f64,
    delta: f64,
    thresholds: Option<Vec<f64>>,
    anneal_ratio: Option<f64>,
    anneal_floor: f64,
    morph_filter: bool,
    log_scale: Option<f64>,
    drizzle: f64,
    pixel_size: f64,
}

impl Default for AnalyticSettings {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            tau_mask: DEFAULT_TAU_MASK,
            delta: DEFAULT_PERSISTENCE_DELTA_MMH,
            thresholds: None,
            anneal_ratio: None,
            anneal_floor: DEFAULT_TAU,
            morph_filter: true,
            log_scale: None,
            drizzle: DEFAULT_DRIZZLE_THRESHOLD,
            pixel_size: minkgeo::grid::DEFAULT_PIXEL_SIZE,
        }
    }
}

/// Threshold spec from explicit thresholds or a calibration file.
fn threshold_spec(a: &AnalyticSettings, calib: Option<&Calibration>) -> Res<ThresholdSpec> {
    if let Some(t) = &a.thresholds {
        return Ok(ThresholdSpec::fixed(t.clone())?);
    }
    calib
        .map(|c| c.thresholds.clone())
        .ok_or_else(|| CliError::validation("thresholds needed: pass --calibration or --thresholds"))
}

struct Loaded {
    surrogate: Surrogate,
    spec: Option<ThresholdSpec>,
}

fn load_surrogate(
    kind: SurrogateKind,
    ckpt: &Option<PathBuf>,
    calibration: &Option<PathBuf>,
    a: &AnalyticSettings,
) -> Res<Loaded> {
    let calib = calibration.as_deref().map(load_calibration).transpose()?;
    match kind {
        SurrogateKind::Analytic => {
            let norm = match (a.log_scale, &calib) {
                (Some(s), _) => NormalizationSpec::new(a.drizzle, s)?,
                (None, Some(c)) => c.normalization,
                (None, None) => {
                    return Err(CliError::validation(
                        "analytic surrogate needs --calibration or --log-scale",
                    ))
                }
            };
            let spec = threshold_spec(a, calib.as_ref())?;
            let mut geom =
                SoftGeomConfig::from_physical(&norm, &spec.physical_thresholds, a.delta, a.pixel_size)?;
            geom.tau = a.tau;
            geom.tau_mask = a.tau_mask;
            geom.use_morph_filter = a.morph_filter;
            if let Some(ratio) = a.anneal_ratio {
                geom.anneal = Anneal::Geometric {
                    ratio,
                    floor: a.anneal_floor,
                };
            }
            geom.validate()?;
            Ok(Loaded {
                surrogate: Surrogate::Analytic { geom, norm },
                spec: Some(spec),
            })
        }
        SurrogateKind::Emulator => {
            let params = load_checkpoint(&need(ckpt, "ckpt")?)?;
            let spec = threshold_spec(a, calib.as_ref()).ok();
            if let Some(sp) = &spec {
                if sp.n_levels() != params.config.n_levels {
                    return Err(CliError::validation(format!(
                        "{} thresholds but the checkpoint has {} levels",
                        sp.n_levels(),
                        params.config.n_levels
                    )));
                }
            }
            Ok(Loaded {
                surrogate: Surrogate::Emulator(Box::new(params)),
                spec,
            })
        }
    }
}

fn emulator_dims(s: &Surrogate) -> Option<(usize, usize)> {
    match s {
        Surrogate::Emulator(p) => Some((p.config.height, p.config.width)),
        Surrogate::Analytic { .. } => None,
    }
}

// ----------------------------------------------------------------------- invert

#[derive(Debug, Args, Serialize)]
pub struct InvertArgs {
    /// Surrogate to invert through.
    #[arg(long, value_parser = ["analytic", "emulator"])]
    surrogate: Option<String>,
    /// Emulator checkpoint directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// calibration.json with thresholds and the log scale.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Target gamma vector as JSON (array or gamma object; areas km^2, perimeters km).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Raster (mm/h) whose exact gamma is the target.
    #[arg(long)]
    target_field: Option<PathBuf>,
    /// Component lifetime floor for the target, mm/h.
    #[arg(long, value_parser = finite)]
    epsilon: Option<f64>,
    /// Global-component cutoff for the target, mm/h.
    #[arg(long, value_parser = finite)]
    cutoff: Option<f64>,
    /// Gradient steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Step size, normalized intensity units per unit gradient.
    #[arg(long, value_parser = finite)]
    lr: Option<f64>,
    /// Total-variation weight (dimensionless).
    #[arg(long, value_parser = finite)]
    lambda_tv: Option<f64>,
    /// Squared-norm weight (dimensionless).
    #[arg(long, value_parser = finite)]
    lambda_l2: Option<f64>,
    /// Seed of the N(0, 1) start, normalized units.
    #[arg(long)]
    seed: Option<u64>,
    /// Grid rows, pixels (default: checkpoint, target field, or 32).
    #[arg(long)]
    height: Option<usize>,
    /// Grid columns, pixels.
    #[arg(long)]
    width: Option<usize>,
    /// Data term in log space.
    #[arg(long, value_parser = ["squared_l2", "l2"])]
    data_term: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    analytic: AnalyticArgs,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertSettings {
    surrogate: SurrogateKind,
    ckpt: Option<PathBuf>,
    calibration: Option<PathBuf>,
    target: Option<PathBuf>,
    target_field: Option<PathBuf>,
    epsilon: f64,
    cutoff: f64,
    steps: usize,
    lr: f64,
    lambda_tv: f64,
    lambda_l2: f64,
    seed: u64,
    height: Option<usize>,
    width: Option<usize>,
    data_term: DataTerm,
    out: Option<PathBuf>,
    analytic: AnalyticSettings,
}

impl Default for InvertSettings {
    fn default() -> Self {
        let c = InversionConfig::default();
        Self {
            surrogate: SurrogateKind::Analytic,
            ckpt: None,
            calibration: None,
            target: None,
            target_field: None,
            epsilon: DEFAULT_PERSISTENCE_EPSILON,
            cutoff: DEFAULT_INFINITE_CUTOFF,
            steps: c.steps,
            lr: c.lr,
            lambda_tv: c.lambda_tv,
            lambda_l2: c.lambda_l2,
            seed: c.seed,
            height: None,
            width: None,
            data_term: c.data_term,
            out: None,
            analytic: AnalyticSettings::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TargetFile {
    Plain(Vec<f64>),
    Gamma(GammaVector),
}

pub fn invert(ctx: &Ctx, args: InvertArgs) -> Res<Value> {
    let s: InvertSettings = resolve("invert", ctx.config.as_deref(), &args)?;
    let out = need(&s.out, "out")?;
    let loaded = load_surrogate(s.surrogate, &s.ckpt, &s.calibration, &s.analytic)?;
    let mut dims = emulator_dims(&loaded.surrogate);
    let target = match (&s.target, &s.target_field) {
        (Some(p), None) => {
            let text = fs::read(p)
                .map_err(|e| CliError::validation(format!("target {}: {e}", p.display())))?;
            match serde_json::from_slice::<TargetFile>(&text)
                .map_err(|e| CliError::validation(format!("target {}: {e}", p.display())))?
            {
                TargetFile::Plain(v) => v,
                TargetFile::Gamma(g) => g.entries,
            }
        }
        (None, Some(p)) => {
            let f = read_field(p)?;
            let spec = loaded
                .spec
                .clone()
                .ok_or_else(|| CliError::validation("--target-field needs thresholds"))?;
            dims = dims.or(Some(f.shape()));
            gamma_exact(&f, &spec, s.epsilon, s.cutoff, false)?.entries
        }
        _ => return Err(CliError::validation("give exactly one of --target and --target-field")),
    };
    let (h, w) = dims.unwrap_or((32, 32));
    let cfg = InversionConfig {
        steps: s.steps,
        lr: s.lr,
        lambda_tv: s.lambda_tv,
        lambda_l2: s.lambda_l2,
        seed: s.seed,
        height: s.height.unwrap_or(h),
        width: s.width.unwrap_or(w),
        data_term: s.data_term,
    };
    let res = run_inversion(&cfg, &loaded.surrogate, &target)?;
    fs::create_dir_all(&out)?;
    diagnostics::write_trace_csv(&out.join("trace.csv"), &res.trace)?;
    write_raster(&res.x0, out.join("x0.mgf"))?;
    write_raster(&res.field, out.join("x_star.mgf"))?;
    diagnostics::write_pgm(&out.join("x0.pgm"), &res.x0)?;
    diagnostics::write_pgm(&out.join("x_star.pgm"), &res.field)?;
    finish(&out, "invert", &s)?;
    Ok(json!({
        "command": "invert",
        "out": out,
        "surrogate": s.surrogate,
        "steps": s.steps,
        "lr": s.lr,
        "lambda_tv": s.lambda_tv,
        "lambda_l2": s.lambda_l2,
        "initial_loss": res.initial_loss(),
        "final_loss": res.final_loss(),
        "reduction": 1.0 - res.final_loss() / res.initial_loss(),
        "target": target,
    }))
}

// -------------------------------------------------------------------- gradcheck

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Surrogate to check.
    #[arg(long, value_parser = ["analytic", "emulator"])]
    surrogate: Option<String>,
    /// Emulator checkpoint directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// calibration.json with thresholds and the log scale.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Random synthetic fields to check.
    #[arg(long)]
    n: Option<usize>,
    /// Field side, pixels (emulator: taken from the checkpoint).
    #[arg(long)]
    size: Option<usize>,
    /// Central-difference step, normalized intensity units, in [1e-8, 1e-3].
    #[arg(long, value_parser = finite)]
    h: Option<f64>,
    /// Field seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Component lifetime floor for the targets, mm/h.
    #[arg(long, value_parser = finite)]
    epsilon: Option<f64>,
    /// Global-component cutoff for the targets, mm/h.
    #[arg(long, value_parser = finite)]
    cutoff: Option<f64>,
    /// Optional output directory for report.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    analytic: AnalyticArgs,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    surrogate: SurrogateKind,
    ckpt: Option<PathBuf>,
    calibration: Option<PathBuf>,
    n: usize,
    size: usize,
    h: f64,
    seed: u64,
    epsilon: f64,
    cutoff: f64,
    out: Option<PathBuf>,
    analytic: AnalyticSettings,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            surrogate: SurrogateKind::Analytic,
            ckpt: None,
            calibration: None,
            n: 100,
            size: 16,
            h: 1e-6,
            seed: 0,
            epsilon: DEFAULT_PERSISTENCE_EPSILON,
            cutoff: DEFAULT_INFINITE_CUTOFF,
            out: None,
            analytic: AnalyticSettings::default(),
        }
    }
}

pub fn gradcheck(ctx: &Ctx, args: GradcheckArgs) -> Res<Value> {
    let s: GradcheckSettings = resolve("gradcheck", ctx.config.as_deref(), &args)?;
    if s.n == 0 {
        return Err(CliError::validation("n must be >= 1"));
    }
    let loaded = load_surrogate(s.surrogate, &s.ckpt, &s.calibration, &s.analytic)?;
    let spec = loaded
        .spec
        .clone()
        .ok_or_else(|| CliError::validation("gradcheck needs thresholds for its targets"))?;
    let (h, w) = emulator_dims(&loaded.surrogate).unwrap_or((s.size, s.size));
    let cfg = MultipeakConfig {
        height: h,
        width: w,
        pixel_size: loaded.surrogate.pixel_size(),
        ..MultipeakConfig::default()
    };
    let cases = (0..s.n)
        .map(|i| {
            let f = gen_multipeak_gaussian(seed_for(s.seed, i), &cfg)?;
            let target = gamma_exact(&f, &spec, s.epsilon, s.cutoff, false)?.entries;
            Ok((normalize(&f, loaded.surrogate.norm())?, target))
        })
        .collect::<minkgeo::Result<Vec<_>>>()?;
    let report = diagnostics::gradcheck(&loaded.surrogate, &cases, s.h)?;
    let mut v = to_json(&report)?;
    v["command"] = json!("gradcheck");
    v["surrogate"] = json!(s.surrogate);
    v["passed"] = json!(report.flagged.is_empty());
    if let Some(out) = &s.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("report.json"), &v)?;
        finish(out, "gradcheck", &s)?;
    }
    Ok(v)
}

// ------------------------------------------------------------------------- raps

#[derive(Debug, Args, Serialize)]
pub struct RapsArgs {
    /// Raster whose spectrum is computed.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Optional reference raster for the ratio and the RAPS error.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Optional output directory for spectrum.csv and ratio.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RapsSettings {
    model: Option<PathBuf>,
    reference: Option<PathBuf>,
    out: Option<PathBuf>,
}

pub fn raps(ctx: &Ctx, args: RapsArgs) -> Res<Value> {
    let s: RapsSettings = resolve("raps", ctx.config.as_deref(), &args)?;
    let model = read_field(need(&s.model, "model")?)?;
    let spectrum = diagnostics::rapsd(&model)?;
    let mut v = json!({
        "command": "raps",
        "k_max": spectrum.power.len() - 1,
        "spectrum": spectrum.power,
    });
    let mut ratio = None;
    if let Some(r) = &s.reference {
        let reference = read_field(r)?;
        let rt = diagnostics::spectral_ratio(&model, &reference)?;
        v["raps_error"] = json!(diagnostics::raps_error(&model, &reference)?);
        v["ratio"] = json!(rt);
        ratio = Some(rt);
    }
    if let Some(out) = &s.out {
        fs::create_dir_all(out)?;
        diagnostics::write_spectrum_csv(&out.join("spectrum.csv"), &spectrum)?;
        if let Some(rt) = &ratio {
            diagnostics::write_ratio_csv(&out.join("ratio.csv"), rt)?;
        }
        finish(out, "raps", &s)?;
    }
    Ok(v)
}

// -------------------------------------------------------------------- mech-sweep

#[derive(Debug, Args, Serialize)]
pub struct MechSweepArgs {
    /// Base raster, mm/h.
    #[arg(long)]
    field: Option<PathBuf>,
    /// Perturbed box as row0,col0,row1,col1 (half-open, pixels).
    #[arg(long, value_delimiter = ',')]
    mask: Option<Vec<usize>>,
    /// Amplitude factors (dimensionless), comma separated.
    #[arg(long, value_delimiter = ',', value_parser = finite)]
    alphas: Option<Vec<f64>>,
    /// Surrogate under test.
    #[arg(long, value_parser = ["analytic", "emulator"])]
    surrogate: Option<String>,
    /// Emulator checkpoint directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// calibration.json with thresholds and the log scale.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Component lifetime floor, mm/h.
    #[arg(long, value_parser = finite)]
    epsilon: Option<f64>,
    /// Global-component cutoff, mm/h.
    #[arg(long, value_parser = finite)]
    cutoff: Option<f64>,
    /// Output directory for sweep.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    analytic: AnalyticArgs,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechSweepSettings {
    field: Option<PathBuf>,
    mask: Option<Vec<usize>>,
    alphas: Vec<f64>,
    surrogate: SurrogateKind,
    ckpt: Option<PathBuf>,
    calibration: Option<PathBuf>,
    epsilon: f64,
    cutoff: f64,
    out: Option<PathBuf>,
    analytic: AnalyticSettings,
}

impl Default for MechSweepSettings {
    fn default() -> Self {
        Self {
            field: None,
            mask: None,
            alphas: (0..=20).map(|i| i as f64 * 0.1).collect(),
            surrogate: SurrogateKind::Analytic,
            ckpt: None,
            calibration: None,
            epsilon: DEFAULT_PERSISTENCE_EPSILON,
            cutoff: DEFAULT_INFINITE_CUTOFF,
            out: None,
            analytic: AnalyticSettings::default(),
        }
    }
}

pub fn mech_sweep(ctx: &Ctx, args: MechSweepArgs) -> Res<Value> {
    let s: MechSweepSettings = resolve("mech-sweep", ctx.config.as_deref(), &args)?;
    let out = need(&s.out, "out")?;
    let base = read_field(need(&s.field, "field")?)?;
    if base.units() != Units::Physical {
        return Err(CliError::validation("sweep field must be in mm/h"));
    }
    let b = need(&s.mask, "mask")?;
    let (h, w) = base.shape();
    if b.len() != 4 || b[0] >= b[2] || b[1] >= b[3] || b[2] > h || b[3] > w {
        return Err(CliError::validation(format!("mask {b:?} is not a box inside {h}x{w}")));
    }
    let mask: Vec<bool> = (0..h * w)
        .map(|i| (b[0]..b[2]).contains(&(i / w)) && (b[1]..b[3]).contains(&(i % w)))
        .collect();
    let mut analytic = s.analytic.clone();
    analytic.pixel_size = base.pixel_size();
    let loaded = load_surrogate(s.surrogate, &s.ckpt, &s.calibration, &analytic)?;
    let exact = ExactSpec {
        thresholds: loaded
            .spec
            .clone()
            .ok_or_else(|| CliError::validation("mech-sweep needs thresholds"))?,
        epsilon: s.epsilon,
        infinite_cutoff: s.cutoff,
    };
    let rows = diagnostics::mechanistic_sweep(&base, &mask, &s.alphas, &loaded.surrogate, &exact)?;
    fs::create_dir_all(&out)?;
    diagnostics::write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    finish(&out, "mech-sweep", &s)?;
    let cc = |r: &diagnostics::SweepRow| -> Vec<f64> { r.exact.iter().skip(2).step_by(3).copied().collect() };
    let steps = rows.windows(2).filter(|p| cc(&p[0]) != cc(&p[1])).count();
    Ok(json!({
        "command": "mech-sweep",
        "out": out,
        "n_alphas": rows.len(),
        "exact_cc_changes": steps,
    }))
}

// ----------------------------------------------------------------- steiner-check

#[derive(Debug, Args, Serialize)]
pub struct SteinerArgs {
    /// Raster side, pixels.
    #[arg(long)]
    resolution: Option<usize>,
    /// Disk radius as a fraction of the unit domain.
    #[arg(long, value_parser = finite)]
    disk_radius: Option<f64>,
    /// Largest dilation radius as a fraction of the unit domain.
    #[arg(long, value_parser = finite)]
    max_radius: Option<f64>,
    /// Number of dilation radii from 0 to the maximum.
    #[arg(long)]
    n_radii: Option<usize>,
    /// Optional output directory for steiner.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteinerSettings {
    resolution: usize,
    disk_radius: f64,
    max_radius: f64,
    n_radii: usize,
    out: Option<PathBuf>,
}

impl Default for SteinerSettings {
    fn default() -> Self {
        Self {
            resolution: 512,
            disk_radius: 0.25,
            max_radius: 0.05,
            n_radii: 11,
            out: None,
        }
    }
}

pub fn steiner(ctx: &Ctx, args: SteinerArgs) -> Res<Value> {
    let s: SteinerSettings = resolve("steiner-check", ctx.config.as_deref(), &args)?;
    if s.n_radii < 2 {
        return Err(CliError::validation("n_radii must be >= 2"));
    }
    let radii: Vec<f64> = (0..s.n_radii)
        .map(|i| s.max_radius * i as f64 / (s.n_radii - 1) as f64)
        .collect();
    let rows = steiner_check(&radii, s.disk_radius, s.resolution)?;
    let max_rel = rows
        .iter()
        .map(|r| (r.lhs_area - r.rhs_area).abs() / r.rhs_area)
        .fold(0.0, f64::max);
    if let Some(out) = &s.out {
        fs::create_dir_all(out)?;
        let mut text = String::from("r,measured_area,steiner_area\n");
        for r in &rows {
            text.push_str(&format!("{},{:e},{:e}\n", r.r, r.lhs_area, r.rhs_area));
        }
        fs::write(out.join("steiner.csv"), text)?;
        finish(out, "steiner-check", &s)?;
    }
    Ok(json!({
        "command": "steiner-check",
        "max_rel_err": max_rel,
        "passed": max_rel < 0.02,
        "rows": rows,
    }))
}
