use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use caseq::data::{build_splits, group_windows};
use caseq::model::{BaselineMode, CaseqConfig, RoutingMode};
use caseq::objective::loss_and_grad;
use caseq::par::with_threads;
use caseq::rng::stream;
use caseq::scm::{sample_dataset, LengthDist, ScmSpec};
use caseq::train::init_params;

fn loss_and_grad_threads(c: &mut Criterion) {
    let spec = ScmSpec::drifting(20, 4, 0.5, 50, 7);
    let ds = sample_dataset(&spec, 64, LengthDist { min: 30, max: 60 }, 1).unwrap();
    let split = build_splits(&ds, 5);
    let config = CaseqConfig {
        event_types: 20,
        dim: 16,
        units: 2,
        layers: 2,
        routing: RoutingMode::Gumbel,
        baseline: BaselineMode::None,
        ..CaseqConfig::default()
    };
    let params = init_params(&config, 0);
    let windows = group_windows(&ds, &split.train, config.max_len);
    let pseudo = caseq::objective::sample_pseudo_sequences(16, 20, LengthDist { min: 1, max: 40 }, &mut stream(2, &[]));
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());

    let mut group = c.benchmark_group("loss_and_grad");
    group.sample_size(10);
    for threads in [1, all] {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            b.iter(|| {
                with_threads(t, || loss_and_grad(&params, &config, &windows, 0.1, &pseudo, config.routing, 3).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, loss_and_grad_threads);
criterion_main!(benches);
