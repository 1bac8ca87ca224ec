//! Data-parallel kernels on the default rayon pool against a one-thread
//! pool. `cargo bench --no-default-features` builds the plain sequential
//! backend instead; both columns then measure the same code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use maskface::eval::extract;
use maskface::loss::MarginSpec;
use maskface::network::{MaskOverride, Network, NetworkConfig};
use maskface::synth::{build_dataset, DatasetConfig};
use maskface::train::{loss_and_grads, make_batch, MixRatio, TrainData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("sequential", one), ("parallel", all)]
}

fn dataset() -> DatasetConfig {
    DatasetConfig {
        identities: 8,
        samples_per_identity: 16,
        ..DatasetConfig::default()
    }
}

fn network() -> Network<f32> {
    Network::new(
        NetworkConfig {
            height: 56,
            width: 48,
            stem_channels: 8,
            stage_channels: [16, 32, 64],
            pyramid_channels: 32,
            embedding_dim: 64,
            num_classes: 8,
            ..NetworkConfig::default()
        },
        1,
    )
    .unwrap()
}

fn synthesis(c: &mut Criterion) {
    let cfg = dataset();
    let mut group = c.benchmark_group("build_dataset");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| build_dataset(&cfg).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let m = build_dataset(&dataset()).unwrap();
    let data = TrainData::new(&m, None).unwrap();
    let net = network();
    let batch = make_batch(&data, MixRatio { occluded: 0, clean: 1 }, 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let margin = MarginSpec::cosface(0.35, 30.0);
    let mut group = c.benchmark_group("forward_backward_b32");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                pool.install(|| loss_and_grads(&net, &batch, &margin, 1.0, &mut rng).unwrap())
            })
        });
    }
    group.finish();
}

fn extraction(c: &mut Criterion) {
    let m = build_dataset(&dataset()).unwrap();
    let net = network();
    let mut group = c.benchmark_group("extract");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| extract(&net, &m, MaskOverride::Decoded).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, synthesis, train_step, extraction);
criterion_main!(benches);
