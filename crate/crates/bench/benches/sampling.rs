use criterion::{black_box, criterion_group, criterion_main, Criterion};
use negdyn::diagnostics::{momentum_curve, strength_ratio};
use negdyn::rng::{self, Role};
use negdyn::sampler::sample_final;
use negdyn::{
    sample, ArchitectureManifest, GuidanceConfig, NeuralDenoiser, NoisePredictor, Prompt, TensorContainer, TokenMap,
    DEFAULT_WINDOW,
};
use negdyn_bench::{default_schedule, lab_backend};

fn removal_config() -> GuidanceConfig {
    GuidanceConfig::unconditional_slot(Prompt::parse("square circle").unwrap(), 7.0)
        .with_negative(Prompt::parse("circle").unwrap(), DEFAULT_WINDOW)
}

fn analytic(c: &mut Criterion) {
    let backend = lab_backend();
    let schedule = default_schedule();
    let x = rng::gaussian(&mut rng::stream(1, 0, Role::Probe), 256);
    let prompt = Prompt::parse("square circle").unwrap();
    c.bench_function("analytic predict", |b| {
        b.iter(|| backend.predict(&schedule, black_box(&x), &prompt, 15).unwrap())
    });
    let cfg = removal_config();
    c.bench_function("analytic 30-step final image", |b| {
        b.iter(|| sample_final(&backend, &schedule, &cfg, black_box(3)).unwrap())
    });
    c.bench_function("analytic 30-step recorded trajectory", |b| {
        b.iter(|| sample(&backend, &schedule, &cfg, black_box(3)).unwrap())
    });
    let traj = sample(&backend, &schedule, &cfg, 3).unwrap();
    let map = TokenMap::new([("circle", "circle")]);
    c.bench_function("strength ratio + momentum", |b| {
        b.iter(|| {
            strength_ratio(black_box(&traj), &map).unwrap();
            momentum_curve(&traj).unwrap()
        })
    });
}

fn neural(c: &mut Criterion) {
    let schedule = default_schedule();
    let vocab = lab_backend().world().vocabulary.tokens().to_vec();
    let model = NeuralDenoiser::init_random(ArchitectureManifest::new(vocab, 16, 16), 0).unwrap();
    let x = rng::gaussian(&mut rng::stream(1, 0, Role::Probe), 256);
    let prompt = Prompt::parse("square circle").unwrap();
    c.bench_function("neural predict", |b| {
        b.iter(|| model.predict(&schedule, black_box(&x), &prompt, 15).unwrap())
    });
    let bytes = model.to_container().to_bytes();
    c.bench_function("NPDL1 parse weights", |b| {
        b.iter(|| TensorContainer::from_bytes(black_box(&bytes)).unwrap())
    });
}

criterion_group!(benches, analytic, neural);
criterion_main!(benches);
