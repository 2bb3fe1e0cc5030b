use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use longitrack_bench::{ball, random_feature_map, shifted_ball};
use longitrack_core::metrics::{nsd, squared_distance_transform};
use longitrack_core::net::{diff_weight, predict_lesion, FusionMode, Model, NetConfig};
use longitrack_core::synth::make_standard_case;

fn bench_diff_weight(c: &mut Criterion) {
    let mut g = c.benchmark_group("diff_weight");
    for &(ch, s) in &[(16usize, 32usize), (64, 8)] {
        let x0 = random_feature_map(1, ch, [s; 3]);
        let xt = random_feature_map(2, ch, [s; 3]);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{s}^3")), &(), |b, _| {
            b.iter(|| diff_weight(black_box(&x0), black_box(&xt), 1e-5).unwrap())
        });
    }
    g.finish();
}

fn bench_distance(c: &mut Criterion) {
    let mut g = c.benchmark_group("surface");
    for n in [32usize, 64] {
        let a = ball(n, n as f64 / 4.0);
        let b = shifted_ball(n, n as f64 / 4.0);
        g.bench_with_input(BenchmarkId::new("edt", n), &a, |bch, a| bch.iter(|| squared_distance_transform(black_box(a), [1.0, 1.0, 1.0])));
        g.bench_with_input(BenchmarkId::new("nsd", n), &(a.clone(), b), |bch, (a, b)| bch.iter(|| nsd(black_box(a), black_box(b), 2.0, [1.0; 3]).unwrap()));
    }
    g.finish();
}

fn bench_inference(c: &mut Criterion) {
    let mut g = c.benchmark_group("predict_lesion");
    g.sample_size(10);
    let case = make_standard_case(4, [64, 64, 64], 1).unwrap();
    let p = case.baseline_prompts[&1];
    for (name, cfg) in [
        ("compact", NetConfig::compact(FusionMode::DiffWeighting)),
        ("default", NetConfig { fusion_mode: FusionMode::DiffWeighting, ..NetConfig::default() }),
    ] {
        let model = Model::new(cfg, 0).unwrap();
        g.bench_function(name, |b| b.iter(|| predict_lesion(&model, &case.baseline.volume, &p, &case.followup.volume, &p).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_diff_weight, bench_distance, bench_inference);
criterion_main!(benches);
