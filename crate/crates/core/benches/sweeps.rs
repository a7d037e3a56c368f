// Data-parallel sweeps, pinned to one thread vs the default rayon pool. Without the
// `parallel` feature both arms run the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use freqmark::clustering::ClusteringMap;
use freqmark::heatmap::{compute_heatmap, HeatmapConfig};
use freqmark::nn::{self, Architecture, Classifier, Example, Shape};
use freqmark::trigger::{gen_triggers, PerturbationKey};
use freqmark::{par, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

fn images(n: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Image::new(SIDE, SIDE, 1, (0..SIDE * SIDE).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect()
}

fn model() -> Classifier {
    let shape = Shape { channels: 1, height: SIDE, width: SIDE };
    Classifier::init(Architecture::tinycnn(shape, 3), 3, 1).unwrap()
}

fn arms() -> [(&'static str, usize); 2] {
    [("sequential", 1), ("parallel", std::thread::available_parallelism().map_or(1, |n| n.get()).max(2))]
}

fn heatmap(c: &mut Criterion) {
    let m = model();
    let imgs = images(32, 2);
    let samples: Vec<Example> = imgs.iter().enumerate().map(|(k, i)| (i, k % 3)).collect();
    let cfg = HeatmapConfig { samples_per_freq: 8, lambda_range: (-1.0, 1.0), seed: 3 };
    let mut g = c.benchmark_group("heatmap");
    g.sample_size(10);
    for (name, threads) in arms() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || compute_heatmap(&m, "bench", &samples, &cfg).unwrap()))
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let m = model();
    let imgs = images(512, 4);
    let samples: Vec<Example> = imgs.iter().enumerate().map(|(k, i)| (i, k % 3)).collect();
    let mut g = c.benchmark_group("evaluate");
    for (name, threads) in arms() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || nn::evaluate(&m, &samples).unwrap()))
        });
    }
    g.finish();
}

fn triggers(c: &mut Criterion) {
    let imgs = images(256, 5);
    let sources: Vec<(u64, &Image)> = imgs.iter().enumerate().map(|(k, i)| (k as u64, i)).collect();
    let mask = ClusteringMap::from_positions(SIDE, SIDE, &[(5, 6), (6, 9), (4, 8)]).unwrap();
    let key = PerturbationKey::new(9, -1.0, 1.0).unwrap();
    let mut g = c.benchmark_group("gen_triggers");
    for (name, threads) in arms() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || gen_triggers(&sources, &mask, "bench", &key).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, heatmap, evaluation, triggers);
criterion_main!(benches);
