use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tutorcount::density::make_density_map;
use tutorcount::experiment::AblationConfig;
use tutorcount::nets::{forward, init_params, main_net_spec, tutornet_spec};
use tutorcount::trainer::{train_step, Mode, TrainState};
use tutorcount::{MainKind, TutorDepth, Width};
use tutorcount_bench::{ramp, scene};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for &(ch, size) in &[(8usize, 32usize), (16, 32), (32, 16)] {
        let x = ramp(&[1, ch, size, size]);
        let k = ramp(&[ch, ch, 3, 3]);
        let b = ramp(&[ch]);
        g.bench_with_input(BenchmarkId::new("forward", format!("{ch}x{size}")), &(), |bench, _| {
            bench.iter(|| black_box(x.conv2d(&k, &b, 1, 1).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", format!("{ch}x{size}")), &(), |bench, _| {
            bench.iter(|| {
                let y = x.conv2d(&k, &b, 1, 1).unwrap().sum();
                y.backward().unwrap();
                x.zero_grad();
                k.zero_grad();
                b.zero_grad();
            })
        });
    }
    g.finish();
}

fn density(c: &mut Criterion) {
    let (s, _) = scene(64, 1000.0);
    c.bench_function("density_map/64_full_res", |b| {
        b.iter(|| black_box(make_density_map(&s, 15.0, 1, 1000.0).unwrap()))
    });
    c.bench_function("density_map/64_down8", |b| b.iter(|| black_box(make_density_map(&s, 15.0, 8, 1000.0).unwrap())));
}

fn networks(c: &mut Criterion) {
    let (s, _) = scene(64, 1000.0);
    let mut g = c.benchmark_group("forward_64");
    for kind in MainKind::ALL {
        let spec = main_net_spec(kind, Width::DESK).unwrap();
        let p = init_params(&spec, 0);
        g.bench_function(kind.name(), |b| b.iter(|| black_box(forward(&spec, &p, s.image()).unwrap())));
    }
    for depth in [TutorDepth::L15, TutorDepth::L43] {
        let spec = tutornet_spec(depth, Width::DESK).unwrap();
        let p = init_params(&spec, 0);
        g.bench_function(spec.name.clone(), |b| b.iter(|| black_box(forward(&spec, &p, s.image()).unwrap())));
    }
    g.finish();
}

fn steps(c: &mut Criterion) {
    let (s, gt) = scene(64, 1000.0);
    let preset = AblationConfig::default();
    let mut g = c.benchmark_group("train_step_64");
    for mode in [Mode::SfOnly, Mode::SfPlusTutor] {
        let cfg = preset.train_config(mode, 0).unwrap();
        let mut state = TrainState::init(&cfg);
        g.bench_function(mode.name(), |b| b.iter(|| black_box(train_step(&s, &gt, &cfg, &mut state, 0, 0).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, conv, density, networks, steps);
criterion_main!(benches);
