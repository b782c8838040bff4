use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hvector::data::{generate_examples, DatasetSpec, Scenario};
use hvector::eval::evaluate;
use hvector::models::{Model, ModelConfig, ModelKind};
use hvector::par::Execution;
use hvector::tensor::Tensor;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        train: 32,
        test: 32,
        ..DatasetSpec::mini_s(Scenario::Overlap)
    }
}

fn inference(c: &mut Criterion) {
    let spec = small_spec();
    let (_, test) = generate_examples(&spec, 1, Execution::Parallel).unwrap();
    let features: Vec<Tensor> = test.iter().map(|ex| ex.features.clone()).collect();
    let model = Model::new(ModelConfig::desk(ModelKind::HVector, spec.num_speakers), 1).unwrap();

    let mut group = c.benchmark_group("predict_all");
    group.sample_size(10);
    group.throughput(Throughput::Elements(features.len() as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(model.predict_all(&features, exec).unwrap()))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(evaluate(&model, &test, spec.num_speakers, None, ("h", "d"), exec).unwrap()))
        });
    }
    group.finish();
}

fn generation(c: &mut Criterion) {
    let spec = small_spec();
    let mut group = c.benchmark_group("generate_examples");
    group.sample_size(10);
    group.throughput(Throughput::Elements((spec.train + spec.test) as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(generate_examples(&spec, 1, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, inference, generation);
criterion_main!(benches);
