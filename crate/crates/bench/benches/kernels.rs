use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use tabbin_core::encoder::{EncoderConfig, EncoderWeights};
use tabbin_core::eval::{lsh_block, topk_cluster, LshParams};
use tabbin_core::nn::{masked_attention, normal_init, MaskMode, Mat};
use tabbin_core::sequence::Visibility;
use tabbin_bench::random_pool;

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("masked_attention");
    for n in [64usize, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Mat<f32> = normal_init(n, 12, 1.0, &mut rng);
        let k: Mat<f32> = normal_init(n, 12, 1.0, &mut rng);
        let v: Mat<f32> = normal_init(n, 12, 1.0, &mut rng);
        let mask = Visibility::from_fn(n, |i, j| (i / 8) == (j / 8) || i % 8 == j % 8);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| masked_attention(black_box(&q.view()), &k.view(), &v.view(), &mask, MaskMode::Additive).unwrap())
        });
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let weights = EncoderWeights::<f32>::init(&cfg, 500, &mut rng).unwrap();
    let x: Mat<f32> = normal_init(128, cfg.hidden, 1.0, &mut rng);
    let mask = Visibility::ones(128);
    c.bench_function("encoder_forward_128", |b| b.iter(|| weights.encode(black_box(&x), &mask, &cfg).unwrap()));
}

fn retrieval(c: &mut Criterion) {
    let pool = random_pool(1000, 96, 3);
    c.bench_function("topk_1000x96", |b| b.iter(|| topk_cluster(black_box("v0000"), &pool, 20).unwrap()));
    c.bench_function("lsh_block_1000x96", |b| b.iter(|| lsh_block(black_box(&pool), LshParams::default(), 7).unwrap()));
}

criterion_group!(benches, attention, encoder, retrieval);
criterion_main!(benches);
