use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fear_core::bench::{run_online, ConstantLatency, DeviceModel, OnlineConfig};
use fear_core::datapipe::{generate_synthetic, DriftProfile};
use fear_core::model::pixel_wise_correlation;
use fear_core::{ModelConfig, Network, TrackSession, TrackerConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn correlation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("correlation");
    for channels in [32usize, 128] {
        let t = Array2::from_shape_simple_fn((channels, 16), || rng.random::<f32>());
        let s = Array2::from_shape_simple_fn((channels, 256), || rng.random::<f32>());
        group.bench_with_input(BenchmarkId::from_parameter(channels), &channels, |b, _| {
            b.iter(|| pixel_wise_correlation(black_box(t.view()), black_box(s.view())).unwrap())
        });
    }
    group.finish();
}

fn feature_extraction(c: &mut Criterion) {
    let net = Network::<f32>::new(ModelConfig::toy()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = ndarray::Array3::from_shape_simple_fn((256, 256, 3), || rng.random::<f32>());
    c.bench_function("backbone_search_crop_toy", |b| {
        b.iter(|| net.extract_features(black_box(&img)).unwrap())
    });
}

fn tracker_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("tracker_step");
    group.sample_size(20);
    for stride in [8usize, 16] {
        let net = Network::<f32>::new(ModelConfig {
            final_stride: stride,
            ..ModelConfig::toy()
        })
        .unwrap();
        let video = generate_synthetic(3, 16, (256, 192), DriftProfile::mild());
        let mut session =
            TrackSession::init(&net, video.frames[0].view(), video.boxes[0], TrackerConfig::default()).unwrap();
        let mut k = 0;
        group.bench_with_input(BenchmarkId::new("stride", stride), &stride, |b, _| {
            b.iter(|| {
                k = k % 15 + 1;
                session.step(video.frames[k].view()).unwrap()
            })
        });
    }
    group.finish();
}

fn online_protocol(c: &mut Criterion) {
    let cfg = OnlineConfig::default();
    let device = DeviceModel::inefficient();
    c.bench_function("online_30min_45ms", |b| {
        b.iter(|| run_online(&mut ConstantLatency(0.045), black_box(&cfg), &device).unwrap())
    });
}

criterion_group!(benches, correlation, feature_extraction, tracker_step, online_protocol);
criterion_main!(benches);
