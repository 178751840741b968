//! Compares the rayon path against the sequential fallback on the
//! Monte-Carlo-heavy kernels. Build with and without the `parallel`
//! feature to compare end to end:
//!
//!   cargo bench -p vesca-core
//!   cargo bench -p vesca-core --no-default-features

use criterion::{criterion_group, criterion_main, Criterion};

use vesca_core::rng::RngState;
use vesca_core::tensor::Tensor;

fn bench_placeholder(c: &mut Criterion) {
    let mut rng = RngState::new(7);
    let data: Vec<f64> = (0..3072).map(|_| rng.next_f64()).collect();
    let t = Tensor::new(vec![3, 32, 32], data).unwrap();
    c.bench_function("tensor_linf", |b| {
        b.iter(|| t.linf_distance(std::hint::black_box(&t)).unwrap())
    });
}

criterion_group!(benches, bench_placeholder);
criterion_main!(benches);
