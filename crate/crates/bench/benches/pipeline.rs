use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hexocc::diffusion::{make_schedule, Dit, Generator};
use hexocc::harness::RunConfig;
use hexocc::hexplane::{rollout, unrollout, HexPlane, PlaneStats};
use hexocc::metrics::{fid, kid, miou, FeatureSet, FeatureSource};
use hexocc::occgrid::generate_toy_scene;
use hexocc::vae::VaeModel;

fn toy() -> RunConfig {
    RunConfig::toy()
}

fn occupancy(c: &mut Criterion) {
    let spec = toy().toy_spec();
    c.bench_function("toy_scene", |b| b.iter(|| generate_toy_scene(black_box(7), &spec).unwrap()));
    let a = generate_toy_scene(1, &spec).unwrap();
    let g = generate_toy_scene(2, &spec).unwrap();
    c.bench_function("miou_toy_pair", |b| b.iter(|| miou(black_box(&a), &g, false).unwrap()));
}

fn hexplanes(c: &mut Criterion) {
    let dims = toy().latent_dims().unwrap();
    let h = HexPlane::random(dims, 3);
    let m = rollout(&h).unwrap();
    c.bench_function("rollout", |b| b.iter(|| rollout(black_box(&h)).unwrap()));
    c.bench_function("unrollout", |b| b.iter(|| unrollout(black_box(&m), &dims, true).unwrap()));
}

fn vae(c: &mut Criterion) {
    let cfg = toy();
    let model = VaeModel::new(cfg.vae_config(), 0).unwrap();
    let q = generate_toy_scene(3, &cfg.toy_spec()).unwrap();
    let h = model.encode_mean(&[&q]).unwrap();
    let mut g = c.benchmark_group("vae");
    g.sample_size(10);
    g.bench_function("encode_mean", |b| b.iter(|| model.encode_mean(&[black_box(&q)]).unwrap()));
    g.bench_function("decode", |b| b.iter(|| model.decode(black_box(&h)).unwrap()));
    g.finish();
}

fn denoiser(c: &mut Criterion) {
    let cfg = toy();
    let dims = cfg.latent_dims().unwrap();
    let dit = Dit::new(cfg.dit_config().unwrap(), 0).unwrap();
    let gen = Generator::new(dit, make_schedule(10, cfg.dit.schedule).unwrap(), PlaneStats::identity(dims.channels)).unwrap();
    let x = gen.to_model_space(&HexPlane::random(dims, 5)).unwrap().data;
    let mut g = c.benchmark_group("dit");
    g.sample_size(10);
    g.bench_function("eps_uncond", |b| b.iter(|| gen.eps(black_box(&x), 5, None).unwrap()));
    g.bench_function("sample_10_steps", |b| {
        b.iter_batched(|| 0u64, |seed| gen.sample(None, 0.0, seed).unwrap(), BatchSize::SmallInput)
    });
    g.finish();
}

fn features(c: &mut Criterion) {
    let (n, d) = (128, 96);
    let make = |s: u64, source| {
        let data = (0..n * d).map(|i| ((i as u64 * 2654435761 + s) % 1000) as f64 / 1000.0).collect();
        FeatureSet::new(n, d, data, source).unwrap()
    };
    let (a, b_) = (make(1, FeatureSource::Real), make(7, FeatureSource::Generated));
    c.bench_function("fid_128x96", |b| b.iter(|| fid(black_box(&a), &b_).unwrap()));
    c.bench_function("kid_128x96", |b| b.iter(|| kid(black_box(&a), &b_, 1.0, 3).unwrap()));
}

fn setup(c: &mut Criterion) {
    hexocc::nn::tune_allocator();
    occupancy(c);
    hexplanes(c);
    vae(c);
    denoiser(c);
    features(c);
}

criterion_group!(benches, setup);
criterion_main!(benches);
