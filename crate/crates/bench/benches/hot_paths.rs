//! Criterion timings for the paths the training loop lives in: convolution
//! forward/backward, batch mixing, InfoNCE with a populated bank, and kNN
//! queries against a feature index.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unmix_core::data::resize_image_batch;
use unmix_core::evalsuite::{knn_predict, FeatureIndex};
use unmix_core::losses::info_nce;
use unmix_core::mixer::{mix_batch, MixConfig};
use unmix_core::tensor::Graph;
use unmix_core::types::{EmbeddingBatch, ImageBatch};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingBatch {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mut row = randn(rng, d);
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
        row.iter_mut().for_each(|v| *v /= norm);
        data.extend(row);
    }
    EmbeddingBatch { data, n, d }
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, cin, h, w, f) = (32, 16, 16, 16, 32);
    let x = randn(&mut rng, n * cin * h * w);
    let wgt = randn(&mut rng, f * cin * 9);

    c.bench_function("conv2d_forward_32x16x16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xi = g.constant(&[n, cin, h, w], x.clone());
            let wi = g.constant(&[f, cin, 3, 3], wgt.clone());
            g.conv2d(xi, wi, 1, 1).unwrap()
        })
    });

    c.bench_function("conv2d_forward_backward_32x16x16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xi = g.leaf(&[n, cin, h, w], x.clone(), true);
            let wi = g.leaf(&[f, cin, 3, 3], wgt.clone(), true);
            let y = g.conv2d(xi, wi, 1, 1).unwrap();
            let s = g.mean_all(y);
            g.backward(s).unwrap();
        })
    });
}

fn bench_mixing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let view = ImageBatch::new(128, 3, 32, 32, randn(&mut rng, 128 * 3 * 32 * 32)).unwrap();
    let cfg = MixConfig {
        enabled: true,
        gamma: 1.0,
        p_global: 0.5,
    };
    c.bench_function("mix_batch_128x3x32x32", |b| {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        b.iter(|| mix_batch(&view, &cfg, &mut r).unwrap())
    });
    c.bench_function("resize_128_32_to_24", |b| {
        b.iter(|| resize_image_batch(&view, 24))
    });
}

fn bench_info_nce(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = unit_rows(&mut rng, 128, 64);
    let k = unit_rows(&mut rng, 128, 64);
    let bank = unit_rows(&mut rng, 4096, 64);
    c.bench_function("info_nce_128q_4096neg", |b| {
        b.iter(|| info_nce(&q, &k, &bank, 0.2).unwrap())
    });
}

fn bench_knn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feats = unit_rows(&mut rng, 2000, 64);
    let labels: Vec<usize> = (0..2000).map(|i| i % 4).collect();
    let index = FeatureIndex::new(feats, labels, 4).unwrap();
    let query = unit_rows(&mut rng, 1, 64);
    c.bench_function("knn200_query_2000x64", |b| {
        b.iter(|| knn_predict(&index, &query.data, 200, 0.1, true))
    });
}

criterion_group!(benches, bench_conv, bench_mixing, bench_info_nce, bench_knn);
criterion_main!(benches);
