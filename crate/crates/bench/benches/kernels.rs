use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mlpmaps::diffkernel::Precision;
use mlpmaps::encodings::{DIR_FEATURES, POINT_FEATURES};
use mlpmaps::hypernet::{DecoderConfig, DecoderWeights, LatentTable};
use mlpmaps::mlpmaps::{BatchFeatures, Head};
use mlpmaps::model::{Model, ModelConfig};
use mlpmaps::renderer::{all_pixels, gen_rays, sample_train};
use mlpmaps::scenekit::{toy_bounds, SyntheticSpec};
use mlpmaps::trainer::{loss_and_grads, ImageRays};
use mlpmaps_bench::{random_maps, random_points};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mlp_maps(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let maps = random_maps::<f32>(&mut rng);
    let mut group = c.benchmark_group("mlp_maps");
    group.sample_size(10);
    for n in [10_000usize, 100_000] {
        let p = random_points::<f32>(&mut rng, n);
        let f = BatchFeatures { point: &p.features, direction: Some(&p.directions) };
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("grouped", n), &n, |b, _| {
            b.iter(|| {
                black_box(maps.batched_eval(&p.batch, &f, Head::Density).unwrap());
                black_box(maps.batched_eval(&p.batch, &f, Head::Color).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("per_point", n), &n, |b, _| {
            b.iter(|| {
                for i in 0..n {
                    let g = &p.features[i * POINT_FEATURES..(i + 1) * POINT_FEATURES];
                    let d = &p.directions[i * DIR_FEATURES..(i + 1) * DIR_FEATURES];
                    black_box(maps.eval_density(g, p.batch.positions[i]));
                    black_box(maps.eval_color(g, d, p.batch.positions[i]));
                }
            })
        });
    }
    group.finish();
}

fn decoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode");
    group.sample_size(10);
    for (name, config) in [("default", DecoderConfig::default()), ("shrunk4", DecoderConfig::shrunk(4).unwrap())] {
        let w = DecoderWeights::<f32>::init(config.clone(), 0).unwrap();
        let z = LatentTable::<f32>::init(1, config.latent_dim, 1);
        group.bench_function(name, |b| b.iter(|| black_box(w.decode(z.latent(0).unwrap(), 0).unwrap())));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut config = ModelConfig::toy(3, toy_bounds());
    config.precision = Precision::F32;
    let model = Model::<f32>::init(config).unwrap();
    let spec = SyntheticSpec { resolution: 64, ..SyntheticSpec::toy() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<ImageRays> = (0..4)
        .map(|k| {
            let cam = spec.ring_camera(&toy_bounds(), k as f64).unwrap();
            let pixels: Vec<(u32, u32)> = all_pixels(&cam).into_iter().step_by(16).collect();
            let rays = gen_rays(&cam, &pixels, &toy_bounds()).unwrap();
            let samples = rays.iter().map(|r| sample_train(r, &mut rng)).collect();
            let target = vec![[0.2, 0.3, 0.4, 1.0]; rays.len()];
            ImageRays { frame: k % 3, view: k, rays, samples, target }
        })
        .collect();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("loss_and_grads_4x256_rays", |b| b.iter(|| black_box(loss_and_grads(&model, &batch, true, 1e-6, 0.1).unwrap())));
    group.finish();
}

criterion_group!(benches, mlp_maps, decoder, train_step);
criterion_main!(benches);
