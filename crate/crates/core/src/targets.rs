//! Threshold calibration, exact gamma vectors and the chunked target store.
//!
//! Store layout:
//!
//! ```text
//! <out>/manifest.json
//! <out>/gamma_0.bin, gamma_1.bin, ...   f64 LE rows, 4096 rows per chunk
//! ```
//!
//! A row is `[A1, P1, CC1, ..., AN, PN, CCN]`, followed by `N` hole counts
//! when the store was built with holes.

use std::borrow::Borrow;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{area, excursion, hole_count, perimeter_of_set};
use crate::grid::{read_raster, Field2D, Units, DEFAULT_DRIZZLE_THRESHOLD};
use crate::persistence::{
    count_components_at, superlevel_persistence_0d, DEFAULT_INFINITE_CUTOFF,
    DEFAULT_PERSISTENCE_EPSILON,
};

pub const DEFAULT_QUANTILE_LEVELS: [f64; 9] = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99];
pub const DEFAULT_SAMPLE_CAP: usize = 50_000_000;
pub const CHUNK_ROWS: usize = 4096;
pub const RASTER_EXTENSION: &str = "mgf";
pub const STORE_FORMAT: &str = "minkgeo-gamma-store";
pub const COMPONENTS: [&str; 3] = ["area", "perimeter", "cc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub quantile_levels: Vec<f64>,
    /// mm/h, strictly ascending.
    pub physical_thresholds: Vec<f64>,
    pub sample_cap: usize,
    /// mm/h
    pub drizzle_threshold: f64,
}

impl ThresholdSpec {
    /// A spec with thresholds given directly rather than calibrated.
    pub fn fixed(thresholds: Vec<f64>) -> Result<Self> {
        let n = thresholds.len();
        let spec = Self {
            quantile_levels: (1..=n).map(|i| i as f64 / (n + 1) as f64).collect(),
            physical_thresholds: thresholds,
            sample_cap: DEFAULT_SAMPLE_CAP,
            drizzle_threshold: DEFAULT_DRIZZLE_THRESHOLD,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_levels(&self) -> usize {
        self.physical_thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.physical_thresholds.is_empty() {
            return Err(Error::InvalidArgument("threshold list is empty".into()));
        }
        if self.quantile_levels.len() != self.physical_thresholds.len() {
            return Err(Error::InvalidArgument(format!(
                "{} quantile levels but {} thresholds",
                self.quantile_levels.len(),
                self.physical_thresholds.len()
            )));
        }
        check_levels(&self.quantile_levels)?;
        let t = &self.physical_thresholds;
        if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "physical thresholds must be strictly ascending, got {t:?}"
            )));
        }
        Ok(())
    }
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty()
        || levels.iter().any(|&q| !(q > 0.0 && q < 1.0))
        || levels.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::InvalidArgument(format!(
            "quantile levels must be strictly ascending in (0, 1), got {levels:?}"
        )));
    }
    Ok(())
}

/// Linear interpolation between order statistics (`h = (n - 1) q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Reservoir-sample up to `cap` pixels exceeding `drizzle` and map each
/// quantile level to the empirical quantile.
pub fn calibrate_thresholds<I, F>(
    corpus: I,
    levels: &[f64],
    cap: usize,
    drizzle: f64,
    seed: u64,
) -> Result<ThresholdSpec>
where
    I: IntoIterator<Item = F>,
    F: Borrow<Field2D>,
{
    check_levels(levels)?;
    if cap == 0 {
        return Err(Error::InvalidArgument("sample cap must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<f64> = Vec::new();
    let mut seen: u64 = 0;
    let mut n_fields = 0usize;
    for f in corpus {
        n_fields += 1;
        for &v in f.borrow().values() {
            if v <= drizzle {
                continue;
            }
            if reservoir.len() < cap {
                reservoir.push(v);
            } else {
                let j = rng.random_range(0..=seen);
                if (j as usize) < cap {
                    reservoir[j as usize] = v;
                }
            }
            seen += 1;
        }
    }
    if n_fields == 0 {
        return Err(Error::Empty("calibration corpus"));
    }
    if reservoir.is_empty() {
        return Err(Error::Empty("no wet pixels in the calibration corpus"));
    }
    reservoir.sort_by(f64::total_cmp);
    let spec = ThresholdSpec {
        quantile_levels: levels.to_vec(),
        physical_thresholds: levels.iter().map(|&q| quantile_sorted(&reservoir, q)).collect(),
        sample_cap: cap,
        drizzle_threshold: drizzle,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaVector {
    pub n_levels: usize,
    /// `[A1, P1, CC1, ..., AN, PN, CCN]`
    pub entries: Vec<f64>,
    pub holes: Option<Vec<u64>>,
}

impl GammaVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() || entries.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "gamma length must be a positive multiple of 3, got {}",
                entries.len()
            )));
        }
        Ok(Self {
            n_levels: entries.len() / 3,
            entries,
            holes: None,
        })
    }

    pub fn component(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().skip(c).step_by(3).copied()
    }

    pub fn area(&self) -> Vec<f64> {
        self.component(0).collect()
    }

    pub fn perimeter(&self) -> Vec<f64> {
        self.component(1).collect()
    }

    pub fn cc(&self) -> Vec<f64> {
        self.component(2).collect()
    }

    pub fn row_len(&self) -> usize {
        3 * self.n_levels + self.holes.as_ref().map_or(0, |h| h.len())
    }

    /// Flat store row.
    pub fn to_row(&self) -> Vec<f64> {
        let mut row = self.entries.clone();
        if let Some(h) = &self.holes {
            row.extend(h.iter().map(|&v| v as f64));
        }
        row
    }

    pub fn from_row(row: &[f64], n_levels: usize, with_holes: bool) -> Result<Self> {
        let need = 3 * n_levels + if with_holes { n_levels } else { 0 };
        if row.len() != need {
            return Err(Error::CorruptStore(format!(
                "row has {} values, expected {need}",
                row.len()
            )));
        }
        let mut g = Self::new(row[..3 * n_levels].to_vec())?;
        if with_holes {
            g.holes = Some(row[3 * n_levels..].iter().map(|&v| v as u64).collect());
        }
        Ok(g)
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.entries.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("gamma entries must be >= 0".into()));
        }
        if self.area().windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument("area must be non-increasing".into()));
        }
        Ok(())
    }
}

/// Exact descriptors at every threshold, sharing one persistence diagram.
pub fn gamma_exact(
    field: &Field2D,
    spec: &ThresholdSpec,
    epsilon: f64,
    infinite_cutoff: f64,
    with_holes: bool,
) -> Result<GammaVector> {
    if field.units() != Units::Physical {
        return Err(Error::InvalidField("gamma_exact expects mm/h".into()));
    }
    let diagram = superlevel_persistence_0d(field);
    let mut entries = Vec::with_capacity(3 * spec.n_levels());
    let mut holes = Vec::new();
    for &u in &spec.physical_thresholds {
        let set = excursion(field, u);
        entries.push(area(&set));
        entries.push(perimeter_of_set(&set));
        entries.push(count_components_at(&diagram, u, epsilon, infinite_cutoff) as f64);
        if with_holes {
            holes.push(hole_count(&set) as u64);
        }
    }
    let mut g = GammaVector::new(entries)?;
    if with_holes {
        g.holes = Some(holes);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOptions {
    pub epsilon: f64,
    pub infinite_cutoff: f64,
    pub with_holes: bool,
    pub workers: usize,
}

impl Default for TargetOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_PERSISTENCE_EPSILON,
            infinite_cutoff: DEFAULT_INFINITE_CUTOFF,
            with_holes: false,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub version: u32,
    pub n_fields: usize,
    pub n_levels: usize,
    pub row_len: usize,
    pub with_holes: bool,
    pub component_order: Vec<String>,
    pub chunk_rows: usize,
    pub chunks: Vec<ChunkInfo>,
    /// Corpus directory the rows were computed from.
    pub corpus_dir: String,
    /// Raster file names, one per row, in row order.
    pub fields: Vec<String>,
    pub skipped: Vec<String>,
    pub spec: ThresholdSpec,
    pub epsilon: f64,
    pub infinite_cutoff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub count: usize,
    pub skipped: usize,
    pub area: ComponentStats,
    pub perimeter: ComponentStats,
    pub cc: ComponentStats,
    /// Fraction of (field, level) pairs with `P^2 < 4 pi A`.
    pub iso_violation_rate: f64,
}

/// Sorted raster paths (`*.mgf`) directly inside `dir`.
pub fn list_rasters(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == RASTER_EXTENSION))
        .collect();
    out.sort();
    Ok(out)
}

pub fn isoperimetric_violation(a: f64, p: f64) -> bool {
    p * p < 4.0 * std::f64::consts::PI * a * (1.0 - 1e-9)
}

fn summarize(rows: &[GammaVector], skipped: usize) -> TargetSummary {
    let stats = |c: usize| {
        let mut sum = 0.0;
        let mut max: f64 = 0.0;
        let mut n = 0usize;
        for g in rows {
            for v in g.component(c) {
                sum += v;
                max = max.max(v);
                n += 1;
            }
        }
        ComponentStats {
            mean: if n > 0 { sum / n as f64 } else { 0.0 },
            max,
        }
    };
    let (mut bad, mut total) = (0usize, 0usize);
    for g in rows {
        for (a, p) in g.component(0).zip(g.component(1)) {
            total += 1;
            bad += isoperimetric_violation(a, p) as usize;
        }
    }
    TargetSummary {
        count: rows.len(),
        skipped,
        area: stats(0),
        perimeter: stats(1),
        cc: stats(2),
        iso_violation_rate: if total > 0 { bad as f64 / total as f64 } else { 0.0 },
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Compute gamma for every raster in `corpus_dir` and write the store to `out`.
pub fn generate_targets(
    corpus_dir: &Path,
    out: &Path,
    spec: &ThresholdSpec,
    opts: &TargetOptions,
) -> Result<TargetSummary> {
    spec.validate()?;
    if opts.workers == 0 {
        return Err(Error::InvalidArgument("workers must be >= 1".into()));
    }
    let paths = list_rasters(corpus_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<Result<GammaVector>> = pool.install(|| {
        paths
            .par_iter()
            .map(|p| {
                let f = read_raster(p)?;
                gamma_exact(&f, spec, opts.epsilon, opts.infinite_cutoff, opts.with_holes)
            })
            .collect()
    });

    let mut rows = Vec::with_capacity(paths.len());
    let mut fields = Vec::with_capacity(paths.len());
    let mut skipped = Vec::new();
    for (p, r) in paths.iter().zip(results) {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        match r {
            Ok(g) => {
                rows.push(g);
                fields.push(name);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped.push(name);
            }
        }
    }

    fs::create_dir_all(out)?;
    for entry in fs::read_dir(out)? {
        let p = entry?.path();
        let stale = p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("gamma_") && n.ends_with(".bin"));
        if stale {
            fs::remove_file(p)?;
        }
    }
    let mut chunks = Vec::new();
    for (k, block) in rows.chunks(CHUNK_ROWS).enumerate() {
        let mut bytes = Vec::new();
        for g in block {
            for v in g.to_row() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let file = format!("gamma_{k}.bin");
        fs::write(out.join(&file), &bytes)?;
        chunks.push(ChunkInfo {
            file,
            rows: block.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let n = spec.n_levels();
    let mut component_order: Vec<String> = COMPONENTS.iter().map(|s| s.to_string()).collect();
    if opts.with_holes {
        component_order.push("holes".into());
    }
    let manifest = StoreManifest {
        format: STORE_FORMAT.into(),
        version: 1,
        n_fields: rows.len(),
        n_levels: n,
        row_len: 3 * n + if opts.with_holes { n } else { 0 },
        with_holes: opts.with_holes,
        component_order,
        chunk_rows: CHUNK_ROWS,
        chunks,
        corpus_dir: corpus_dir.to_string_lossy().into_owned(),
        fields,
        skipped: skipped.clone(),
        spec: spec.clone(),
        epsilon: opts.epsilon,
        infinite_cutoff: opts.infinite_cutoff,
    };
    fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(summarize(&rows, skipped.len()))
}

/// A verified, fully loaded target store.
#[derive(Debug, Clone)]
pub struct GammaStore {
    pub manifest: StoreManifest,
    pub rows: Vec<GammaVector>,
}

impl GammaStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read(&mpath)
            .map_err(|e| Error::CorruptStore(format!("{}: {e}", mpath.display())))?;
        let manifest: StoreManifest = serde_json::from_slice(&text)
            .map_err(|e| Error::CorruptStore(format!("{}: {e}", mpath.display())))?;
        if manifest.format != STORE_FORMAT {
            return Err(Error::CorruptStore(format!("unknown format {}", manifest.format)));
        }
        if manifest.fields.len() != manifest.n_fields {
            return Err(Error::CorruptStore("field list does not match n_fields".into()));
        }
        let mut rows = Vec::with_capacity(manifest.n_fields);
        for c in &manifest.chunks {
            let path = dir.join(&c.file);
            let bytes = fs::read(&path)
                .map_err(|e| Error::CorruptStore(format!("{}: {e}", path.display())))?;
            if sha256_hex(&bytes) != c.sha256 {
                return Err(Error::CorruptStore(format!("checksum mismatch in {}", c.file)));
            }
            if bytes.len() != c.rows * manifest.row_len * 8 {
                return Err(Error::CorruptStore(format!("{} has the wrong length", c.file)));
            }
            let vals: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            for row in vals.chunks_exact(manifest.row_len) {
                rows.push(GammaVector::from_row(row, manifest.n_levels, manifest.with_holes)?);
            }
        }
        if rows.len() != manifest.n_fields {
            return Err(Error::CorruptStore(format!(
                "{} rows but manifest says {}",
                rows.len(),
                manifest.n_fields
            )));
        }
        Ok(Self { manifest, rows })
    }

    /// Raster paths paired with each row, resolved against the recorded corpus.
    pub fn field_paths(&self) -> Vec<PathBuf> {
        let base = Path::new(&self.manifest.corpus_dir);
        self.manifest.fields.iter().map(|f| base.join(f)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::connected_components_floodfill;
    use crate::grid::{gen_multipeak_gaussian, write_raster, MultipeakConfig};

    #[test]
    fn quantile_examples() {
        let f = Field2D::from_fn(10, 10, 2.0, Units::Physical, |r, c| (r * 10 + c + 1) as f64)
            .unwrap();
        let spec = calibrate_thresholds([&f], &[0.5], 1000, 0.1, 0).unwrap();
        assert_eq!(spec.physical_thresholds, vec![50.5]);
        let spec = calibrate_thresholds([&f], &[1e-12], 1000, 0.1, 0).unwrap();
        assert!((spec.physical_thresholds[0] - 1.0).abs() < 1e-9);
        assert_eq!(DEFAULT_SAMPLE_CAP, 50_000_000);
    }

    #[test]
    fn calibration_errors_and_determinism() {
        let dry = Field2D::zeros(4, 4, 2.0, Units::Physical).unwrap();
        assert!(matches!(
            calibrate_thresholds([&dry], &[0.5], 10, 0.1, 0),
            Err(Error::Empty(_))
        ));
        assert!(calibrate_thresholds(Vec::<Field2D>::new(), &[0.5], 10, 0.1, 0).is_err());
        assert!(calibrate_thresholds([&dry], &[0.5, 0.2], 10, 0.1, 0).is_err());
        let cfg = MultipeakConfig::default();
        let fields: Vec<Field2D> = (0..20).map(|s| gen_multipeak_gaussian(s, &cfg).unwrap()).collect();
        let a = calibrate_thresholds(&fields, &[0.1, 0.5, 0.9], 500, 0.1, 9).unwrap();
        let b = calibrate_thresholds(&fields, &[0.1, 0.5, 0.9], 500, 0.1, 9).unwrap();
        assert_eq!(a, b);
        let c = calibrate_thresholds(&fields, &[0.1, 0.5, 0.9], 500, 0.1, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gamma_examples() {
        let spec = ThresholdSpec::fixed(vec![0.5, 1.0, 2.0]).unwrap();
        let dry = Field2D::zeros(8, 8, 2.0, Units::Physical).unwrap();
        let g = gamma_exact(&dry, &spec, 0.05, 0.01, true).unwrap();
        assert!(g.entries.iter().all(|&v| v == 0.0));
        let blob = Field2D::from_fn(16, 16, 2.0, Units::Physical, |r, c| {
            let d = (r as f64 - 7.5).powi(2) + (c as f64 - 7.5).powi(2);
            10.0 * (-d / 18.0).exp()
        })
        .unwrap();
        let g = gamma_exact(&blob, &spec, 0.05, f64::INFINITY, false).unwrap();
        assert_eq!(g.cc(), vec![1.0; 3]);
        // the global component only counts at or below the cutoff
        let g = gamma_exact(&blob, &spec, 0.05, 0.01, false).unwrap();
        assert_eq!(g.cc(), vec![0.0; 3]);
        assert!(gamma_exact(&blob.with_units(Units::Normalized), &spec, 0.05, 0.01, false).is_err());
    }

    #[test]
    fn gamma_invariants_and_diagram_reuse() {
        let cfg = MultipeakConfig::default();
        let spec = ThresholdSpec::fixed(vec![0.2, 1.0, 3.0, 8.0]).unwrap();
        for seed in 0..1000 {
            let f = gen_multipeak_gaussian(seed, &cfg).unwrap();
            let g = gamma_exact(&f, &spec, 0.0, f64::INFINITY, false).unwrap();
            g.check_invariants().unwrap();
            if seed < 100 {
                for (i, &u) in spec.physical_thresholds.iter().enumerate() {
                    let d = superlevel_persistence_0d(&f);
                    assert_eq!(g.cc()[i], count_components_at(&d, u, 0.0, f64::INFINITY) as f64);
                    let set = excursion(&f, u);
                    assert_eq!(g.cc()[i], connected_components_floodfill(&set) as f64);
                }
            }
        }
    }

    fn write_corpus(dir: &Path, n: u64) {
        let cfg = MultipeakConfig::default();
        for s in 0..n {
            let f = gen_multipeak_gaussian(s, &cfg).unwrap();
            write_raster(&f, dir.join(format!("field_{s:05}.mgf"))).unwrap();
        }
    }

    #[test]
    fn store_round_trip_and_worker_determinism() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = tmp.path().join("corpus");
        fs::create_dir(&corpus).unwrap();
        write_corpus(&corpus, 30);
        fs::write(corpus.join("broken.mgf"), b"nope").unwrap();
        let spec = ThresholdSpec::fixed(vec![0.5, 2.0, 5.0]).unwrap();
        let mut opts = TargetOptions {
            with_holes: true,
            ..TargetOptions::default()
        };
        let s1 = generate_targets(&corpus, &tmp.path().join("a"), &spec, &opts).unwrap();
        opts.workers = 8;
        let s8 = generate_targets(&corpus, &tmp.path().join("b"), &spec, &opts).unwrap();
        assert_eq!(s1, s8);
        assert_eq!(s1.count, 30);
        assert_eq!(s1.skipped, 1);
        for name in ["manifest.json", "gamma_0.bin"] {
            let a = fs::read(tmp.path().join("a").join(name)).unwrap();
            let b = fs::read(tmp.path().join("b").join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
        // idempotent re-run
        generate_targets(&corpus, &tmp.path().join("a"), &spec, &opts).unwrap();
        let store = GammaStore::open(&tmp.path().join("a")).unwrap();
        assert_eq!(store.rows.len(), 30);
        let paths = store.field_paths();
        let f = read_raster(&paths[3]).unwrap();
        assert_eq!(store.rows[3], gamma_exact(&f, &spec, 0.05, 0.01, true).unwrap());

        // corruption is detected
        let chunk = tmp.path().join("a/gamma_0.bin");
        let mut bytes = fs::read(&chunk).unwrap();
        bytes[10] ^= 1;
        fs::write(&chunk, bytes).unwrap();
        assert!(matches!(
            GammaStore::open(&tmp.path().join("a")),
            Err(Error::CorruptStore(_))
        ));
    }

    #[test]
    fn dry_corpus() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = tmp.path().join("c");
        fs::create_dir(&corpus).unwrap();
        write_raster(
            &Field2D::zeros(8, 8, 2.0, Units::Physical).unwrap(),
            corpus.join("dry.mgf"),
        )
        .unwrap();
        let spec = ThresholdSpec::fixed(vec![1.0]).unwrap();
        let s = generate_targets(&corpus, &tmp.path().join("o"), &spec, &TargetOptions::default())
            .unwrap();
        assert_eq!(s.count, 1);
        assert_eq!(s.iso_violation_rate, 0.0);
        let store = GammaStore::open(&tmp.path().join("o")).unwrap();
        assert_eq!(store.rows[0].entries, vec![0.0; 3]);
    }

    #[test]
    fn iso_violation_tolerance() {
        let a = 10.0;
        let p = (4.0 * std::f64::consts::PI * a).sqrt();
        assert!(!isoperimetric_violation(a, p));
        assert!(isoperimetric_violation(a, p * 0.99));
    }
}
