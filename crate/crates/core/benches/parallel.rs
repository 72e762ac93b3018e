use std::hint::black_box;

use cointel_core::dgm::{cointelation_pde_problem, loss_and_grad, sample_batch, Domain, TrainConfig};
use cointel_core::experiment::{run_experiment, ExperimentConfig, Label};
use cointel_core::moments::{mc_moment_oracle, McConfig};
use cointel_core::net::DgmNetwork;
use cointel_core::sim::{CointelationParams, DAILY};
use cointel_core::Exec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn moment_oracle(c: &mut Criterion) {
    let p = CointelationParams::example1();
    let mut g = c.benchmark_group("mc_moment_oracle_50k");
    for (name, exec) in MODES {
        let cfg = McConfig { exec, ..McConfig::new(50_000, 1) };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mc_moment_oracle(&p, 1.0, 1.0, DAILY, black_box(&cfg)).unwrap())
        });
    }
    g.finish();
}

fn dgm_loss(c: &mut Criterion) {
    let p = CointelationParams::example1();
    let pde = cointelation_pde_problem(&p, 0.5, Domain::new(4.0, 0.5, 2.0).unwrap()).unwrap();
    let net = DgmNetwork::new(20, 2, 1).unwrap().with_input_map(pde.domain.input_map());
    let cfg = TrainConfig { batch_interior: 512, batch_terminal: 128, ..TrainConfig::default() };
    let batch = sample_batch(&pde, &cfg, 0);
    let mut g = c.benchmark_group("dgm_loss_and_grad_640pts");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| loss_and_grad(&net, &pde, black_box(&batch), &cfg.weights, exec).unwrap())
        });
    }
    g.finish();
}

fn experiment(c: &mut Criterion) {
    let mut g = c.benchmark_group("experiment_32_paths");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = ExperimentConfig {
            n_paths: 32,
            horizon_days: 250,
            strategies: vec![Label::Mvc, Label::MlLs, Label::Ml],
            exec,
            ..ExperimentConfig::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_experiment(black_box(&cfg), None).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, moment_oracle, dgm_loss, experiment);
criterion_main!(benches);
