use criterion::{criterion_group, criterion_main, Criterion};
use deeppce::{ConditionSpec, ExactInference};
use deeppce_bench::random_model;
use std::hint::black_box;

fn moments(c: &mut Criterion) {
    let model = random_model(8, 8, 2, 2, 8);
    let inf = ExactInference::new(&model).unwrap();
    let spec = ConditionSpec::new([(0, 0.5), (1, -0.3), (2, 1.1), (4, 0.0)]).unwrap();
    let set = [0, 1, 2, 4];
    let mut group = c.benchmark_group("moments-d8-o8");
    group.bench_function("mean+covariance", |b| b.iter(|| inf.moments().unwrap()));
    group.bench_function("conditional", |b| {
        b.iter(|| inf.conditional_covariance(black_box(&spec)).unwrap())
    });
    group.bench_function("expected-conditional-covariance", |b| {
        b.iter(|| inf.expected_conditional_covariance(black_box(&set)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, moments);
criterion_main!(benches);
