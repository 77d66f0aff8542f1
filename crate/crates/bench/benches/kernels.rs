use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segdiff_core::ffparser::{ffparser_apply, SpectralFilter, SpectralShape};
use segdiff_core::network::{ModelConfig, SegDiffNet};
use segdiff_core::schedule::NoisePredictor;
use segdiff_core::staple::{staple_fuse, RaterStack};
use segdiff_core::{Graph, Tensor};

fn spectral_filter(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = Tensor::<f32>::randn(&[32, 64, 64], &mut rng);
    let filter = SpectralFilter::identity(SpectralShape::new(64, 64, 32));
    c.bench_function("ffparser 32x64x64", |b| b.iter(|| ffparser_apply(black_box(&m), &filter).unwrap()));
}

fn staple(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth: Vec<bool> = (0..64 * 64).map(|_| rng.random_bool(0.3)).collect();
    let decisions: Vec<Vec<bool>> = (0..25)
        .map(|_| truth.iter().map(|&t| if rng.random_bool(0.1) { !t } else { t }).collect())
        .collect();
    let stack = RaterStack::with_data_prior(decisions).unwrap();
    c.bench_function("staple 25 raters 64x64", |b| b.iter(|| staple_fuse(black_box(&stack), 1e-6, 100).unwrap()));
}

fn network(c: &mut Criterion) {
    let net = SegDiffNet::<f32>::new(ModelConfig::s_toy(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 4;
    let x = Tensor::<f32>::randn(&[n, 1, 64, 64], &mut rng);
    let image = Tensor::<f32>::randn(&[n, 1, 64, 64], &mut rng);
    let t: Vec<usize> = (0..n).map(|i| i * 200).collect();
    let mut group = c.benchmark_group("s-toy batch 4");
    group.sample_size(10);
    group.bench_function("predict", |b| b.iter(|| net.predict(black_box(&x), &image, &t).unwrap()));
    group.bench_function("forward and backward", |b| {
        b.iter_batched(
            Graph::new,
            |g| {
                let out = net.predict_noise(&g, g.constant(x.clone()), g.constant(image.clone()), &t).unwrap();
                let loss = out.mse(g.constant(x.clone())).unwrap();
                black_box(g.backward(loss).unwrap());
            },
            BatchSize::PerIteration,
        )
    });
    group.finish();
}

criterion_group!(benches, spectral_filter, staple, network);
criterion_main!(benches);
