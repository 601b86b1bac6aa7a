use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use tinylab::kernels::{gemm, Mat};
use tinylab::{Arch, Mode, Model, ModelConfig, Tape, Tensor};

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    // Shapes met in a training step: projections over B*T rows and the head.
    for (m, k, n) in [(8192, 128, 128), (8192, 128, 256), (64, 128, 65)] {
        let a = random(m * k, 1);
        let b = random(k * n, 2);
        let mut out = vec![0.0f32; m * n];
        group.throughput(Throughput::Elements((2 * m * k * n) as u64));
        group.bench_function(
            BenchmarkId::from_parameter(format!("{m}x{k}x{n}")),
            |bench| {
                bench.iter(|| {
                    gemm(
                        Mat::new(&a, m, k),
                        Mat::new(&b, k, n),
                        0.0,
                        black_box(&mut out),
                    )
                })
            },
        );
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("causal_attention");
    group.sample_size(20);
    let (heads, seq, dim) = (64 * 4, 128, 32);
    let q = Tensor::new(&[heads, seq, dim], random(heads * seq * dim, 3)).unwrap();
    let k = Tensor::new(&[heads, seq, dim], random(heads * seq * dim, 4)).unwrap();
    let v = Tensor::new(&[heads, seq, dim], random(heads * seq * dim, 5)).unwrap();
    group.bench_function("forward_backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(&v));
            let y = tape
                .causal_attention(qv, kv, vv, 0.176, 0.0, &mut Mode::<ChaCha8Rng>::Eval)
                .unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(qv).map(|g| g[0]))
        })
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let windows: Vec<Vec<usize>> = (0..64)
        .map(|b| (0..128).map(|i| (i * 7 + b) % 65).collect())
        .collect();
    let batch: Vec<&[usize]> = windows.iter().map(Vec::as_slice).collect();
    let targets: Vec<usize> = (0..64).map(|b| b % 65).collect();
    for arch in Arch::ALL {
        let model = Model::<f32>::new(ModelConfig::preset(arch, 128, 65), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        group.bench_function(arch.name(), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let logits = model
                    .forward(&mut tape, &bound, &batch, &mut Mode::Train(&mut rng))
                    .unwrap();
                let loss = tape.cross_entropy(logits, &targets).unwrap();
                tape.backward(loss).unwrap();
                black_box(tape.value(loss)[0])
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_attention, bench_train_step);
criterion_main!(benches);
