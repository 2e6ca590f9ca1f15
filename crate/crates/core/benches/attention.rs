use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use lano_core::attention::AttentionVariant;
use lano_core::bench::{run_kernel, KernelInputs};

fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_kernel");
    group.sample_size(10);
    for n in [256usize, 512, 1024] {
        let inputs = KernelInputs::<f32>::random(n, 32, 64, 4, 0).unwrap();
        for v in [
            AttentionVariant::Agent,
            AttentionVariant::Linear,
            AttentionVariant::Softmax,
        ] {
            group.bench_with_input(BenchmarkId::new(v.name(), n), &inputs, |b, inputs| {
                b.iter(|| black_box(run_kernel(v, inputs).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
