use std::hint::black_box;

use condensate_bench::{leading_params, warm_simulation, wf_start};
use condensate_core::kingman::KingmanVector;
use condensate_core::moments::{solve_hierarchy, MomentSystem};
use condensate_core::ode::{integrate, ConstantModulation};
use condensate_core::pd::{stick_break, wf_step, WfScheme, WfWork};
use condensate_core::rng::rng_from_seed;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

fn particle_events(c: &mut Criterion) {
    let mut group = c.benchmark_group("ip_events");
    group.throughput(Throughput::Elements(10_000));
    for sites in [1000usize, 10_000] {
        let sim = warm_simulation(sites, 1.0, 7);
        group.bench_function(format!("L={sites}"), |b| {
            b.iter_batched_ref(
                || sim.clone(),
                |s| {
                    for _ in 0..10_000 {
                        black_box(s.step().unwrap());
                    }
                },
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn control_ode(c: &mut Criterion) {
    let params = leading_params(1, 1.0);
    let grid: Vec<f64> = (0..=30).map(|i| i as f64 * 0.1).collect();
    c.bench_function("control_ode_a1", |b| {
        b.iter(|| integrate(&params, &params.empty_slow_phase(), black_box(&grid)).unwrap())
    });
}

fn wright_fisher(c: &mut Criterion) {
    let params = leading_params(1, 1.0);
    let mut group = c.benchmark_group("wf_step_m50");
    for (name, scheme) in [
        ("bessel", WfScheme::BesselSplit),
        ("euler", WfScheme::EulerMaruyama(Default::default())),
    ] {
        group.bench_function(name, |b| {
            let mut state = wf_start(&params, 50);
            let mut rng = rng_from_seed(3);
            let mut work = WfWork::default();
            b.iter(|| wf_step(&mut state, &params, 1e-3, scheme, &mut rng, &mut work))
        });
    }
    group.finish();
}

fn poisson_dirichlet(c: &mut Criterion) {
    let mut rng = rng_from_seed(5);
    c.bench_function("stick_break_theta1_k40", |b| b.iter(|| stick_break(1.0, 40, &mut rng)));
    let system = MomentSystem::new(6);
    let x0 = KingmanVector::from_unsorted(vec![1.0]);
    let modulation = ConstantModulation::new(1.0, 1.0);
    c.bench_function("moment_hierarchy_deg6", |b| {
        b.iter(|| solve_hierarchy(&system, &modulation, &x0, black_box(&[0.0, 1.0, 2.0]), 1e-3))
    });
}

criterion_group!(benches, particle_events, control_ode, wright_fisher, poisson_dirichlet);
criterion_main!(benches);
