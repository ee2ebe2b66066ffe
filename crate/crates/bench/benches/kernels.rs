use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gradphi::dynamics::{langevin_step, GibbsChain};
use gradphi::heat_kernel::{init_heat_kernel, step_heat_kernel};
use gradphi::moderation::{ModerationContext, Variant};
use gradphi::spectral_oracle::gaussian_variance;
use gradphi::{EnvironmentTrajectory, LangevinConfig, ModerationWeights, PotentialSpec, Torus};

fn langevin(c: &mut Criterion) {
    let v = PotentialSpec::flat_bottom(1.0, 0.0).unwrap();
    let mut g = c.benchmark_group("langevin_step");
    for l in [4usize, 16, 32] {
        let torus = Torus::new(2, l).unwrap();
        let phi = vec![0.0; torus.vertex_count()];
        let noise: Vec<f64> = (0..torus.vertex_count())
            .map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5)
            .collect();
        g.bench_with_input(BenchmarkId::from_parameter(l), &l, |b, _| {
            b.iter(|| langevin_step(&torus, black_box(&phi), &v, 0.01, &noise, 1e6).unwrap())
        });
    }
    g.finish();
}

fn gibbs_sample(c: &mut Criterion) {
    let v = PotentialSpec::power(4.0, 0.25).unwrap();
    let torus = Torus::new(2, 8).unwrap();
    let cfg = LangevinConfig {
        burn_in: 1.0,
        ..LangevinConfig::for_torus(8, 1)
    };
    let mut chain = GibbsChain::new(&torus, &cfg, "bench", 0);
    chain.burn_in(&torus, &v, &cfg).unwrap();
    c.bench_function("gibbs_next_sample_d2_L8", |b| {
        b.iter(|| {
            chain.next_sample(&torus, &v, &cfg).unwrap();
        })
    });
}

fn heat_kernel(c: &mut Criterion) {
    let mut g = c.benchmark_group("heat_kernel_step");
    for l in [4usize, 16, 32] {
        let torus = Torus::new(2, l).unwrap();
        let a: Vec<f64> = (0..torus.edge_count())
            .map(|e| 0.5 + (e % 5) as f64 * 0.1)
            .collect();
        let mut state = init_heat_kernel(&torus, 0, 0.0);
        g.bench_with_input(BenchmarkId::from_parameter(l), &l, |b, _| {
            b.iter(|| step_heat_kernel(&torus, &mut state, black_box(&a), 0.05).unwrap())
        });
    }
    g.finish();
}

fn moderated(c: &mut Criterion) {
    let torus = Torus::new(2, 4).unwrap();
    let slice: Vec<f64> = (0..torus.edge_count()).map(|e| (e % 3) as f64).collect();
    let traj = EnvironmentTrajectory::constant(&torus, &slice, 0.05, 800, "bench");
    let ctx = ModerationContext::new(
        &torus,
        &traj,
        ModerationWeights::calibrated(2, 3.0).unwrap(),
    )
    .unwrap();
    c.bench_function("moderated_environment_value", |b| {
        b.iter(|| ctx.value(black_box(0), 3, 400, Variant::Body).unwrap())
    });
}

fn oracle(c: &mut Criterion) {
    c.bench_function("gaussian_variance_d2_L64", |b| {
        b.iter(|| gaussian_variance(2, black_box(64)).unwrap())
    });
}

criterion_group!(
    benches,
    langevin,
    gibbs_sample,
    heat_kernel,
    moderated,
    oracle
);
criterion_main!(benches);
