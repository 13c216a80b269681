use mlpmaps::diffkernel::Precision;
use mlpmaps::encodings::{dir_encode, embed_batch, HashConfig, POINT_FEATURES};
use mlpmaps::hypernet::DecoderConfig;
use mlpmaps::model::{Model, ModelConfig, Renderable};
use mlpmaps::occupancy::{OccupancyVolume, DEFAULT_RESOLUTION, DEFAULT_TAU1};
use mlpmaps::renderer::*;
use mlpmaps::scenekit::{toy_bounds, SyntheticSpec};

fn config() -> ModelConfig {
    ModelConfig {
        decoder: DecoderConfig::shrunk(16).unwrap(),
        hash: HashConfig { levels: 4, log2_table_size: 10, features: 2, min_resolution: 4, max_resolution: 32 },
        frames: 3,
        bounds: toy_bounds(),
        precision: Precision::F64,
        seed: 1,
    }
}

#[test]
fn precision_must_match() {
    assert!(Model::<f32>::init(config()).is_err());
    let mut c = config();
    c.precision = Precision::F32;
    assert!(Model::<f32>::init(c).is_ok());
}

#[test]
fn normalized_time() {
    let c = config();
    assert_eq!((c.time(0), c.time(1), c.time(2)), (0.0, 0.5, 1.0));
    let single = ModelConfig { frames: 1, ..config() };
    assert_eq!(single.time(0), 0.0);
}

#[test]
fn field_matches_pointwise_evaluation() {
    let model = Model::<f64>::init(config()).unwrap();
    let maps = model.decode(2).unwrap();
    let field = model.field(&maps);
    let pts: Vec<Vec3> = (0..50).map(|i| [-0.5 + 0.02 * i as f64, 0.3 - 0.01 * i as f64, -0.9 + 0.035 * i as f64]).collect();
    let (sigma, cache) = field.density(&pts).unwrap();
    let select: Vec<usize> = (0..50).step_by(3).collect();
    let dir = [0.0, 0.6, 0.8];
    let rgb = field.color(&pts, &cache, &select, &vec![dir; select.len()]).unwrap();
    for (k, &i) in select.iter().enumerate() {
        let u = model.bounds().to_unit(pts[i]);
        let gamma = embed_batch(&model.hash, &model.projector, maps.triplanes(), &[u], 1.0);
        assert_eq!(gamma.len(), POINT_FEATURES);
        let (s, _) = maps.eval_density(&gamma, u);
        assert!((s - sigma[i]).abs() < 1e-9);
        let c = maps.eval_color(&gamma, &dir_encode(dir), u);
        for j in 0..3 {
            assert!((c[j] - rgb[k][j]).abs() < 1e-9);
        }
    }
}

#[test]
fn cleared_model_is_empty() {
    let mut model = Model::<f64>::init(config()).unwrap();
    model.clear_density();
    let maps = model.decode(1).unwrap();
    let field = model.field(&maps);
    let occ = OccupancyVolume::build_with(DEFAULT_RESOLUTION, *model.bounds(), 1, DEFAULT_TAU1, |p| field.density_f64(p)).unwrap();
    assert_eq!(occ.occupied_count(), 0);
    let cam = SyntheticSpec { resolution: 16, ..SyntheticSpec::toy() }.ring_camera(model.bounds(), 0.0).unwrap();
    let opts = RenderOptions { use_ess: false, ..Default::default() };
    let img = render_image(&field, &cam, model.bounds(), &opts, None).unwrap();
    assert!(img.rgb.iter().all(|&v| v == 0.0) && img.alpha.iter().all(|&a| a == 0.0));
}

#[test]
fn renderable_caches_and_checks_frames() {
    let r = Renderable::new(Model::<f64>::init(config()).unwrap(), 2);
    let a = r.maps(1).unwrap();
    let b = r.maps(1).unwrap();
    assert_eq!(r.cache.decodes(), 1);
    assert!(std::sync::Arc::ptr_eq(&a, &b));
    assert!(r.maps(3).is_err());
}

#[test]
fn render_is_deterministic_across_tilings() {
    let model = Model::<f64>::init(config()).unwrap();
    let maps = model.decode(0).unwrap();
    let field = model.field(&maps);
    let cam = SyntheticSpec { resolution: 20, ..SyntheticSpec::toy() }.ring_camera(model.bounds(), 0.0).unwrap();
    let opts = |tile| RenderOptions { use_ess: false, tile, ..Default::default() };
    let a = render_image(&field, &cam, model.bounds(), &opts(64), None).unwrap();
    let b = render_image(&field, &cam, model.bounds(), &opts(64), None).unwrap();
    assert_eq!(a, b);
    let c = render_image(&field, &cam, model.bounds(), &opts(7), None).unwrap();
    let worst = a.rgb.iter().zip(&c.rgb).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(worst < 1e-6);
    assert!(a.alpha.iter().all(|&o| (0.0..=1.0 + 1e-6).contains(&o)));
}
