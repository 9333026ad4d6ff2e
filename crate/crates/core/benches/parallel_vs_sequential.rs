use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use harq_relay::sim::{run_many, SimRun};
use harq_relay::{Execution, PolicyKind, SystemConfig};

fn system() -> SystemConfig {
    SystemConfig {
        num_users: 2,
        num_relays: 1,
        arrival_rates: vec![0.3, 0.3],
        cost_rates: vec![vec![0.98, 1.0, 1.02], vec![1.25, 1.5, 1.75]],
        retx_limits: vec![2, 2],
        bs_channel_params: vec![0.9, 0.9],
        relay_channel_params: vec![vec![0.9, 0.5]],
        bs_relay_params: vec![0.5],
        decode_decay: 0.9,
        initial_backlog: vec![],
        drain_costs: None,
    }
}

fn replications(c: &mut Criterion) {
    let cfg = system();
    let specs: Vec<SimRun> = [PolicyKind::RlpaIndex, PolicyKind::NoRelayIndex]
        .into_iter()
        .map(|k| SimRun::new(&cfg, k, 20_000, 0))
        .collect();
    let mut g = c.benchmark_group("run_many");
    g.sample_size(10);
    for (name, exec) in [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel { jobs: 0 }),
    ] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_many(&specs, 8, 7, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, replications);
criterion_main!(benches);
