use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vapor_core::harness::{setup, EnvSpec, ExperimentConfig, World};
use vapor_core::oracles::{ts_monte_carlo_pgamma, TsDynamics};
use vapor_core::par::Exec;

fn grid_beliefs() -> vapor_core::bayes::BeliefState {
    let cfg = ExperimentConfig::new(
        EnvSpec::Gridworld {
            size: 6,
            world_seed: Some(2024),
            rewards: Default::default(),
        },
        Vec::new(),
    );
    match setup(&cfg, 0).expect("gridworld setup").world {
        World::Conjugate(b) => b,
        World::Finite(_) => unreachable!("gridworld beliefs are conjugate"),
    }
}

fn thompson_pgamma(c: &mut Criterion) {
    let beliefs = grid_beliefs();
    let mut group = c.benchmark_group("ts_monte_carlo_pgamma_6x6_1000");
    group.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| ts_monte_carlo_pgamma(black_box(&beliefs), 1000, 7, TsDynamics::MeanTransitions, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, thompson_pgamma);
criterion_main!(benches);
