use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rana_core::adapters::{forward_batch, Activation, MlpWeights};
use rana_core::allocation::{grid_search_mlp, MlpSearchOptions};
use rana_core::decomposition::{decompose, rank_contributions_with, CalibrationSet};
use rana_core::tensor::{matmul_with, seeded_rng, Matrix};
use rana_core::Exec;

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut rng = seeded_rng(0);
    let a = Matrix::gaussian(256, 256, 1.0, &mut rng);
    let b = Matrix::gaussian(256, 1024, 1.0, &mut rng);
    let mut g = c.benchmark_group("matmul_256x256x1024");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| bench.iter(|| matmul_with(&a, &b, exec).unwrap()));
    }
    g.finish();
}

fn contributions(c: &mut Criterion) {
    let mut rng = seeded_rng(1);
    let w = Matrix::gaussian(128, 128, 1.0, &mut rng);
    let calib = CalibrationSet::new(Matrix::gaussian(128, 2048, 1.0, &mut rng));
    let dec = decompose(&w, &calib, 128).unwrap();
    let mut g = c.benchmark_group("rank_contributions_128x2048");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| bench.iter(|| rank_contributions_with(&dec, &calib, exec).unwrap()));
    }
    g.finish();
}

fn mlp(c: &mut Criterion) {
    let mut rng = seeded_rng(2);
    let (d, h) = (32, 64);
    let w = MlpWeights::new(
        Matrix::gaussian(h, d, 0.2, &mut rng),
        Some(Matrix::gaussian(h, d, 0.2, &mut rng)),
        Matrix::gaussian(d, h, 0.2, &mut rng),
        Activation::Silu,
    )
    .unwrap();
    let calib = CalibrationSet::new(Matrix::gaussian(d, 512, 1.0, &mut rng));
    let mut g = c.benchmark_group("mlp");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::new("forward_batch", name), |bench| bench.iter(|| forward_batch(&w, calib.x(), exec).unwrap()));
        let opts = MlpSearchOptions { exec, ..Default::default() };
        g.bench_function(BenchmarkId::new("grid_search", name), |bench| bench.iter(|| grid_search_mlp(&w, &calib, 0.5, &opts).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, matmul, contributions, mlp);
criterion_main!(benches);
