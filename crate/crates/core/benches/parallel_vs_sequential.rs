//! Compares the data-parallel hot paths on a one-thread pool against the
//! default pool. Build with `--no-default-features` to bench the plain
//! sequential fallback instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tcav_core::cav::{CavKind, CavParams};
use tcav_core::latent::{elbow_scan, KMeansParams};
use tcav_core::par;
use tcav_core::pipeline::CavJob;
use tcav_core::superpixel::{slic, SlicParams};

fn gaussian_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (0..d).map(|j| rng.sample::<f64, _>(StandardNormal) + if j == i % 3 { 4.0 } else { 0.0 }).collect())
        .collect()
}

fn cav_batch(pool: &[Vec<f64>]) -> usize {
    let jobs: Vec<CavJob> = (0..40)
        .map(|t| CavJob {
            concept_id: 0,
            kind: CavKind::Random,
            seed: t,
            members: Vec::new(),
            size: 60,
        })
        .collect();
    let params = CavParams::default();
    par::try_map(&jobs, |j| j.run(pool, &params)).unwrap().len()
}

fn slic_batch(images: &[Array2<f32>]) -> usize {
    let params = SlicParams { n_segments: 8, ..Default::default() };
    par::map(images, |im| slic(im, &params).unwrap()).len()
}

fn bench(c: &mut Criterion) {
    let points = gaussian_points(600, 16, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images: Vec<Array2<f32>> = (0..32).map(|_| Array2::from_shape_fn((64, 64), |_| rng.random::<f32>())).collect();
    let ks: Vec<usize> = (2..=12).collect();

    let mode = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };
    let default_threads = rayon::current_num_threads();
    let mut group = c.benchmark_group(format!("hot_paths_{mode}"));
    group.sample_size(10);
    for threads in [1, default_threads] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        group.bench_with_input(BenchmarkId::new("cav_fits", threads), &threads, |b, _| {
            b.iter(|| pool.install(|| black_box(cav_batch(&points))))
        });
        group.bench_with_input(BenchmarkId::new("elbow_scan", threads), &threads, |b, _| {
            b.iter(|| pool.install(|| black_box(elbow_scan(&points, &ks, 0, KMeansParams::default()).unwrap())))
        });
        group.bench_with_input(BenchmarkId::new("slic", threads), &threads, |b, _| {
            b.iter(|| pool.install(|| black_box(slic_batch(&images))))
        });
        if threads == default_threads {
            break;
        }
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
