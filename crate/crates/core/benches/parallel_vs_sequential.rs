use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use changenet::ddr::{self, DdrVariant, NormConfig};
use changenet::exec::with_parallel;
use changenet::network::{NetConfig, SdNetwork};
use changenet::{data, stats, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn bench_liw(c: &mut Criterion) {
    let mut g = c.benchmark_group("liw_forward");
    let f = random(&[8, 64, 32, 32], 1);
    let cfg = NormConfig::default();
    for parallel in [false, true] {
        g.bench_with_input(BenchmarkId::from_parameter(if parallel { "parallel" } else { "sequential" }), &parallel, |b, &p| {
            b.iter(|| {
                with_parallel(p, || {
                    let tape = Tape::new();
                    let x = tape.leaf(f.clone());
                    ddr::liw_forward(&tape, x, &cfg).unwrap()
                })
            })
        });
    }
    g.finish();
}

fn bench_network(c: &mut Criterion) {
    let mut g = c.benchmark_group("tiny_network_infer");
    g.sample_size(10);
    let norm = NormConfig { variant: DdrVariant::Glw, ..NormConfig::default() };
    let mut net = SdNetwork::<f32>::new(NetConfig::tiny(norm), 0).unwrap();
    let xa = random(&[8, 3, 64, 64], 2);
    let xb = random(&[8, 3, 64, 64], 3);
    for parallel in [false, true] {
        g.bench_with_input(BenchmarkId::from_parameter(if parallel { "parallel" } else { "sequential" }), &parallel, |b, &p| {
            b.iter(|| with_parallel(p, || net.infer(&xa, &xb).unwrap()))
        });
    }
    g.finish();
}

fn bench_data(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_dataset");
    g.sample_size(10);
    let cfg = data::GenConfig::default();
    for parallel in [false, true] {
        g.bench_with_input(BenchmarkId::from_parameter(if parallel { "parallel" } else { "sequential" }), &parallel, |b, &p| {
            b.iter(|| with_parallel(p, || data::generate_dataset(&cfg, 32, 7).unwrap()))
        });
    }
    g.finish();
}

fn bench_stats(c: &mut Criterion) {
    let mut g = c.benchmark_group("region_channel_stats");
    let f = random(&[64, 96, 96], 4).cast::<f64>();
    let grid = stats::make_grid(96, 96, 6).unwrap();
    for parallel in [false, true] {
        g.bench_with_input(BenchmarkId::from_parameter(if parallel { "parallel" } else { "sequential" }), &parallel, |b, &p| {
            b.iter(|| with_parallel(p, || stats::region_channel_stats(&f, &grid, 1e-5).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_liw, bench_network, bench_data, bench_stats);
criterion_main!(benches);
