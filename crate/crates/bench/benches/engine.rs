use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use vaultcredit::estimators::{fit_impact, UtilizationFit, Window};
use vaultcredit::metrics::{v2_expected_shortfall, v3_boundary_hitting};
use vaultcredit::pipeline::{score, EngineConfig};
use vaultcredit::simkit::{self, WorldConfig};
use vaultcredit_bench::{lambdas, v2_book};

fn v2(c: &mut Criterion) {
    let input = v2_book(1e6);
    c.bench_function("v2_10k_paths", |b| b.iter(|| v2_expected_shortfall(black_box(&input), 10_000, 1).unwrap()));
}

fn v3(c: &mut Criterion) {
    let fit = UtilizationFit::diffusion(0.0, 0.01);
    c.bench_function("v3_10k_paths_168h", |b| {
        b.iter(|| v3_boundary_hitting(black_box(0.9), &fit, 1.0, 168, 10_000, 1, 1.0).unwrap())
    });
}

fn lambda_fit(c: &mut Criterion) {
    let obs = simkit::impact_observations(&lambdas(), 500, 1e-4, None, 0, 2);
    let w = Window { start: 0, end: i64::MAX / 2 };
    c.bench_function("lambda_fit_1000_obs", |b| b.iter(|| fit_impact(black_box(&obs), false, w).unwrap()));
}

fn full_score(c: &mut Criterion) {
    let (bundle, _) = simkit::generate(&WorldConfig { hours: 120 * 24, ..WorldConfig::default() }, 7).unwrap();
    let cfg = EngineConfig { seed: 7, ..EngineConfig::default() };
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    g.bench_function("score_120d_world", |b| b.iter(|| score(black_box(&bundle), &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, v2, v3, lambda_fit, full_score);
criterion_main!(benches);
