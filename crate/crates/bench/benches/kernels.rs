use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use leancl_core::mask::to_csr;
use leancl_core::nn::cross_entropy;
use leancl_core::{BufferEntry, Model, RehearsalBuffer, Tensor, WeightMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mlp_forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::<f32>::mlp(&[784], &[256], 10, &mut rng).unwrap();
    let x = Tensor::from_fn(&[32, 784], |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
    c.bench_function("mlp 784-256-10 forward b32", |b| b.iter(|| model.predict(black_box(&x)).unwrap()));
    c.bench_function("mlp 784-256-10 forward+backward b32", |b| {
        b.iter(|| {
            let (logits, cache) = model.forward(black_box(&x)).unwrap();
            let loss = cross_entropy(&logits, &labels).unwrap();
            model.backward(&cache, &loss.grad).unwrap()
        })
    });
}

fn cnn_forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::<f32>::small_cnn(&[1, 28, 28], 8, 3, 10, &mut rng).unwrap();
    let x = Tensor::from_fn(&[16, 1, 28, 28], |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..16).map(|i| i % 10).collect();
    c.bench_function("cnn 8x3x3 forward+backward b16", |b| {
        b.iter(|| {
            let (logits, cache) = model.forward(black_box(&x)).unwrap();
            let loss = cross_entropy(&logits, &labels).unwrap();
            model.backward(&cache, &loss.grad).unwrap()
        })
    });
}

fn mask_updates(c: &mut Criterion) {
    let shapes = vec![vec![256, 784], vec![10, 256]];
    let mask = WeightMask::init(&shapes, 0.75, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores: Vec<Vec<f64>> = mask.layers().iter().map(|l| l.iter().map(|_| rng.random()).collect()).collect();
    let count = (0.01 * mask.total() as f64).round() as usize;
    c.bench_function("mask shrink 1% of 203k", |b| {
        b.iter_batched(
            || mask.clone(),
            |mut m| m.shrink_by_scores(&scores, count).unwrap(),
            BatchSize::LargeInput,
        )
    });
    c.bench_function("mask grow 1% of 203k", |b| {
        b.iter_batched(
            || (mask.clone(), ChaCha8Rng::seed_from_u64(4)),
            |(mut m, mut r)| m.grow_random(count, &mut r).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn csr_export(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Tensor::<f32>::from_fn(&[256, 784], |_| rng.random_range(-1.0..1.0));
    let mask = WeightMask::init(&[vec![256, 784]], 0.9, 6).unwrap();
    c.bench_function("csr export 256x784 at 90% sparsity", |b| {
        b.iter(|| to_csr(black_box(&w), mask.layer_bits(0)).unwrap())
    });
}

fn reservoir(c: &mut Criterion) {
    let entry = BufferEntry {
        input: Tensor::<f32>::zeros(&[784]),
        label: 0,
        stored_logits: Tensor::zeros(&[10]),
        task_id: 1,
        insertion_id: 0,
    };
    c.bench_function("reservoir insert 10k into capacity 200", |b| {
        b.iter_batched(
            || (RehearsalBuffer::new(200), ChaCha8Rng::seed_from_u64(7)),
            |(mut buf, mut rng)| {
                for id in 0..10_000 {
                    buf.reservoir_insert(BufferEntry { insertion_id: id, ..entry.clone() }, &mut rng);
                }
                buf
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, mlp_forward_backward, cnn_forward_backward, mask_updates, csr_export, reservoir);
criterion_main!(benches);
