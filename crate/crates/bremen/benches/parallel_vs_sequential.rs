use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bremen::exec;
use bremen::linalg::Matrix;
use bremen::nn::MlpParams;

fn bench_map_indexed(c: &mut Criterion) {
    let mut group = c.benchmark_group("map_indexed");
    for n in [64usize, 1024] {
        let work = |i: usize| -> f64 {
            let mut acc = i as f64;
            for k in 1..500 {
                acc = (acc + 1.0 / k as f64).sin();
            }
            acc
        };
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| black_box(exec::map_indexed_seq(n, work)))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
            b.iter(|| black_box(exec::map_indexed_par(n, work)))
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    // matmul dispatches to the row-parallel kernel above a work threshold,
    // so sizing the inputs on both sides of it compares the two paths
    let mut group = c.benchmark_group("matmul");
    for n in [48usize, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::new(n, n, (0..n * n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        let b_m = Matrix::new(n, n, (0..n * n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| black_box(a.matmul(&b_m)))
        });
    }
    group.finish();
}

fn bench_mlp_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = MlpParams::init(&[6, 64, 64, 4], &mut rng);
    let input = Matrix::new(
        512,
        6,
        (0..512 * 6).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect(),
    )
    .unwrap();
    c.bench_function("mlp_forward_512x6_2x64", |b| {
        b.iter(|| black_box(net.forward(&input).unwrap()))
    });
}

criterion_group!(benches, bench_map_indexed, bench_matmul, bench_mlp_forward);
criterion_main!(benches);
