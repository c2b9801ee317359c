use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nimbus_bench::{noise_field, noise_tensor};
use nimbus_core::autodiff::{ConvSpec, Graph, Params};
use nimbus_core::causal3d::{encode_full, CausalStack};
use nimbus_core::edm::{sample_deterministic, sample_stochastic, GaussianDenoiser, SamplerConfig};
use nimbus_core::spectral::{fft2, ifft2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn fft(c: &mut Criterion) {
    let mut g = c.benchmark_group("fft2");
    for (h, w) in [(32, 64), (64, 128), (96, 160)] {
        let x = noise_field(h, w, 0);
        g.bench_with_input(
            BenchmarkId::new("forward", format!("{h}x{w}")),
            &x,
            |b, x| b.iter(|| fft2(black_box(x.view())).unwrap()),
        );
        let s = fft2(x.view()).unwrap();
        g.bench_with_input(
            BenchmarkId::new("inverse", format!("{h}x{w}")),
            &s,
            |b, s| b.iter(|| ifft2(black_box(s))),
        );
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let x = noise_tensor(&[4, 16, 32, 64], 1);
    let k = noise_tensor(&[16, 16, 3, 3], 2);
    c.bench_function("conv2d forward+backward 4x16x32x64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let kv = g.constant(k.clone()).unwrap();
            let y = g.conv2d(xv, kv, ConvSpec::spatial(1, 1)).unwrap();
            let l = g.mean(y).unwrap();
            black_box(g.backward(l).unwrap());
        })
    });

    let stack = CausalStack::new("enc", 8, &[8, 16, 8], true).unwrap();
    let mut p = Params::new();
    stack.init(&mut p, &mut ChaCha8Rng::seed_from_u64(3));
    let w = noise_tensor(&[1, 8, 5, 32, 64], 4);
    c.bench_function("causal encode k=4 8x32x64", |b| {
        b.iter(|| encode_full(&stack, &p, black_box(&w), true).unwrap())
    });
}

fn sampler(c: &mut Criterion) {
    let dim = 1024;
    let den = GaussianDenoiser::new(vec![0.3; dim], vec![0.5; dim]).unwrap();
    let cfg = SamplerConfig::default();
    let mut g = c.benchmark_group("edm sampler 25 steps");
    g.bench_function("deterministic", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        b.iter(|| sample_deterministic(&den, dim, &mut rng, &cfg).unwrap())
    });
    g.bench_function("stochastic", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        b.iter(|| sample_stochastic(&den, dim, &mut rng, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, fft, conv, sampler);
criterion_main!(benches);
