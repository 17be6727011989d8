use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use minkgeo::analytic::SoftGeomConfig;
use minkgeo::autodiff::{Shape, Tape};
use minkgeo::diagnostics::{loss_and_grad, rapsd, Surrogate};
use minkgeo::emulator::{Arch, EmulatorConfig, EmulatorParams};
use minkgeo::grid::{gen_multipeak_gaussian, normalize, MultipeakConfig};
use minkgeo::persistence::superlevel_persistence_0d;
use minkgeo::targets::{gamma_exact, ThresholdSpec};
use minkgeo::NormalizationSpec;

const THRESHOLDS: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 10.0];

fn field(n: usize) -> minkgeo::Field2D {
    let cfg = MultipeakConfig {
        height: n,
        width: n,
        n_peaks: 6,
        ..MultipeakConfig::default()
    };
    gen_multipeak_gaussian(7, &cfg).unwrap()
}

fn exact(c: &mut Criterion) {
    let spec = ThresholdSpec::fixed(THRESHOLDS.to_vec()).unwrap();
    let mut g = c.benchmark_group("exact");
    for n in [32, 128, 256] {
        let f = field(n);
        g.bench_with_input(BenchmarkId::new("gamma_exact", n), &f, |b, f| {
            b.iter(|| gamma_exact(black_box(f), &spec, 0.05, 0.01, false).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("persistence", n), &f, |b, f| {
            b.iter(|| superlevel_persistence_0d(black_box(f)))
        });
        g.bench_with_input(BenchmarkId::new("rapsd", n), &f, |b, f| b.iter(|| rapsd(black_box(f)).unwrap()));
    }
    g.finish();
}

fn surrogates(c: &mut Criterion) {
    let norm = NormalizationSpec::new(0.1, 21f64.ln()).unwrap();
    let f = field(32);
    let x = normalize(&f, &norm).unwrap();
    let spec = ThresholdSpec::fixed(THRESHOLDS.to_vec()).unwrap();
    let target = gamma_exact(&f, &spec, 0.05, 0.01, false).unwrap().entries;

    let geom = SoftGeomConfig::from_physical(&norm, &THRESHOLDS, 0.05, f.pixel_size()).unwrap();
    let analytic = Surrogate::Analytic { geom, norm };
    let params = EmulatorParams::init(
        EmulatorConfig::new(Arch::Constrained, 32, 32, THRESHOLDS.len(), f.pixel_size()),
        norm,
        0,
    )
    .unwrap();
    let emulator = Surrogate::Emulator(Box::new(params));

    let mut g = c.benchmark_group("surrogate_32");
    for (name, s) in [("analytic", &analytic), ("emulator", &emulator)] {
        g.bench_function(format!("{name}_forward"), |b| {
            b.iter(|| {
                let mut t = Tape::new();
                let v = t.var(x.values().to_vec(), Shape::Grid(32, 32)).unwrap();
                s.features(&mut t, v).unwrap()
            })
        });
        g.bench_function(format!("{name}_loss_and_grad"), |b| {
            b.iter(|| loss_and_grad(s, black_box(&x), &target, [3.0, 1.0, 1.5]).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, exact, surrogates);
criterion_main!(benches);
