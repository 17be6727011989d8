use minkgeo::diagnostics::{invert, InversionConfig, Surrogate};
use minkgeo::emulator::{
    evaluate, load_checkpoint, save_checkpoint, train_emulator, Arch, Dataset, EmulatorConfig,
    EmulatorParams, TrainConfig,
};
use minkgeo::grid::{gen_multipeak_gaussian, read_raster, write_raster, MultipeakConfig};
use minkgeo::targets::{calibrate_thresholds, generate_targets, GammaStore, TargetOptions};
use minkgeo::NormalizationSpec;

#[test]
fn corpus_to_store_to_checkpoint_to_inversion() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    let cfg = MultipeakConfig { height: 16, width: 16, ..MultipeakConfig::default() };
    let fields: Vec<_> = (0..20).map(|s| gen_multipeak_gaussian(s, &cfg).unwrap()).collect();
    for (i, f) in fields.iter().enumerate() {
        write_raster(f, corpus.join(format!("f{i:02}.mgf"))).unwrap();
    }
    let spec = calibrate_thresholds(fields.iter(), &[0.25, 0.5, 0.75], 100_000, 0.1, 0).unwrap();
    let store_dir = tmp.path().join("store");
    let summary = generate_targets(&corpus, &store_dir, &spec, &TargetOptions::default()).unwrap();
    assert_eq!(summary.count, 20);

    let store = GammaStore::open(&store_dir).unwrap();
    assert_eq!(store.rows.len(), 20);
    let loaded: Vec<_> = store.field_paths().iter().map(|p| read_raster(p).unwrap()).collect();
    for (a, b) in loaded.iter().zip(&fields) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| (x - y).abs() <= 1e-6 * y.abs().max(1.0)));
    }

    let norm = NormalizationSpec::fit(0.1, loaded.iter()).unwrap();
    let targets: Vec<Vec<f64>> = store.rows.iter().map(|g| g.entries.clone()).collect();
    let ds = Dataset::from_fields(&loaded, &targets, &norm).unwrap();
    let ec = EmulatorConfig { hidden: 24, ..EmulatorConfig::new(Arch::Constrained, 16, 16, 3, cfg.pixel_size) };
    let params = EmulatorParams::init(ec, norm, 1).unwrap();
    let tc = TrainConfig { epochs: 3, batch: 8, ..TrainConfig::default() };
    let (params, history) = train_emulator(params, &ds, &tc).unwrap();
    assert!(history.epochs.iter().all(|e| e.train_loss.is_finite()));
    let m = evaluate(&params, &ds).unwrap();
    assert_eq!(m.nu_iso, 0.0);
    assert_eq!(m.monotonicity_violations, 0.0);

    let ck = tmp.path().join("ck");
    save_checkpoint(&params, &ck).unwrap();
    let back = load_checkpoint(&ck).unwrap();
    assert_eq!(back, params);

    let s = Surrogate::Emulator(Box::new(back));
    let icfg = InversionConfig { steps: 15, height: 16, width: 16, ..InversionConfig::default() };
    let r = invert(&icfg, &s, &targets[0]).unwrap();
    assert_eq!(r.trace.len(), 16);
    assert!(r.final_loss() < r.initial_loss());
}
