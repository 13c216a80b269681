use mlpmaps::diffkernel::Tensor;
use mlpmaps::encodings::Plane;
use mlpmaps::hypernet::{DecodeCache, DecoderConfig, DecoderWeights, LatentTable, MapPlanes};
use mlpmaps::mlpmaps::{COLOR_PARAMS, DENSITY_PARAMS};
use mlpmaps::Error;

fn small() -> DecoderWeights<f64> {
    DecoderWeights::init(DecoderConfig::shrunk(16).unwrap(), 3).unwrap()
}

#[test]
fn default_decode_shapes() {
    let w = DecoderWeights::<f32>::init(DecoderConfig::default(), 0).unwrap();
    let z = LatentTable::<f32>::init(1, 256, 7);
    let maps = w.decode(z.latent(0).unwrap(), 0).unwrap();
    assert_eq!(maps.density_maps().len(), 3);
    assert_eq!(maps.color_maps().len(), 3);
    for (m, p) in maps.density_maps().iter().zip(Plane::ALL) {
        assert_eq!(m.plane(), p);
        assert_eq!(m.params().len(), 256 * 256 * DENSITY_PARAMS);
    }
    for m in maps.color_maps() {
        assert_eq!(m.resolution(), 16);
        assert_eq!(m.params().len(), 16 * 16 * COLOR_PARAMS);
    }
    assert_eq!(maps.triplanes().tensor().shape(), &[96, 256, 256]);
    assert!(maps.density_maps().iter().all(|m| m.params().iter().all(|v| v.is_finite())));
}

#[test]
fn zero_head_weights_give_zero_maps() {
    let mut w = small();
    for name in ["density.weight", "density.bias", "color.out.weight", "color.out.bias"] {
        w.tensor_mut(name).unwrap().data_mut().fill(0.0);
    }
    for seed in [1, 2] {
        let z = LatentTable::<f64>::init(1, 256, seed);
        let maps = w.decode(z.latent(0).unwrap(), 0).unwrap();
        for m in maps.density_maps().iter().chain(maps.color_maps()) {
            assert!(m.params().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn decode_is_pure() {
    let w = small();
    let z = LatentTable::<f64>::init(2, 256, 5);
    let a = w.decode(z.latent(1).unwrap(), 1).unwrap();
    let b = w.decode(z.latent(1).unwrap(), 1).unwrap();
    assert_eq!(a, b);
    let c = w.decode(z.latent(0).unwrap(), 0).unwrap();
    assert_ne!(a.density_maps()[0].params(), c.density_maps()[0].params());
}

#[test]
fn latent_access() {
    let a = LatentTable::<f64>::init(4, 256, 7);
    let b = LatentTable::<f64>::init(4, 256, 7);
    assert_eq!(a.latent(0).unwrap(), b.latent(0).unwrap());
    assert!(matches!(a.latent(4), Err(Error::OutOfRange { .. })));
    let z = a.latent(0).unwrap();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    assert!(mean.abs() < 0.01);
    let std = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64).sqrt();
    assert!((std - 0.01).abs() < 0.002, "std {std}");
}

#[test]
fn cache_memoizes_and_evicts() {
    let w = small();
    let z = LatentTable::<f64>::init(4, 256, 7);
    let cache = DecodeCache::default();
    let decode = |f: usize| w.decode(z.latent(f).unwrap(), f);
    let first = cache.get_or_decode(3, || decode(3)).unwrap();
    let second = cache.get_or_decode(3, || decode(3)).unwrap();
    assert_eq!(cache.decodes(), 1);
    assert_eq!(*first, *second);
    assert_eq!(*first, decode(3).unwrap());

    let tiny = DecodeCache::new(1);
    for f in [0, 1, 0, 1] {
        tiny.get_or_decode(f, || decode(f)).unwrap();
    }
    assert_eq!(tiny.decodes(), 4);

    let lru = DecodeCache::new(2);
    for f in [0, 1, 0, 2, 0] {
        lru.get_or_decode(f, || decode(f)).unwrap();
    }
    // 0 was most recently used when 2 arrived, so 1 was evicted
    assert_eq!(lru.decodes(), 3);
}

#[test]
fn channel_groups_map_to_planes() {
    let base = small();
    let z = LatentTable::<f64>::init(1, 256, 9);
    let before = base.decode(z.latent(0).unwrap(), 0).unwrap();
    let mut w = base.clone();
    for v in &mut w.tensor_mut("density.bias").unwrap().data_mut()[..DENSITY_PARAMS] {
        *v += 1.0;
    }
    for v in &mut w.tensor_mut("color.out.bias").unwrap().data_mut()[..COLOR_PARAMS] {
        *v += 1.0;
    }
    let after = w.decode(z.latent(0).unwrap(), 0).unwrap();
    for p in 0..3 {
        let same = p != 0;
        assert_eq!(before.density_maps()[p] == after.density_maps()[p], same);
        assert_eq!(before.color_maps()[p] == after.color_maps()[p], same);
    }
    assert_eq!(before.triplanes(), after.triplanes());
}

#[test]
fn single_plane_config() {
    let mut config = DecoderConfig::shrunk(16).unwrap();
    config.planes = MapPlanes::SingleXy;
    let w = DecoderWeights::<f64>::init(config, 1).unwrap();
    let maps = w.decode(&[0.0; 256], 0).unwrap();
    assert_eq!(maps.planes(), vec![Plane::XY]);
}

#[test]
fn nonfinite_activation_names_layer() {
    let mut w = small();
    w.tensor_mut("stem.weight").unwrap().data_mut().fill(1e300);
    let err = w.decode(&[1e10; 256], 0).unwrap_err();
    match err {
        Error::NonFinite { op } => assert!(op.contains("stem"), "{op}"),
        e => panic!("unexpected {e}"),
    }
    assert!(w.decode(&[f64::NAN; 256], 0).is_err());
}

#[test]
fn initial_head_scale() {
    let w = small();
    let maps = w.decode(&[0.0; 256], 0).unwrap();
    let vals: Vec<f64> = maps.color_maps().iter().flat_map(|m| m.params().iter().copied()).collect();
    let std = (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt();
    assert!(std > 0.1 && std < 0.4, "color std {std}");
}

#[test]
fn weights_roundtrip_through_tensors() {
    let w = small();
    let tensors: Vec<Tensor<f64>> = w.tensors().to_vec();
    let back = DecoderWeights::from_tensors(w.config().clone(), tensors).unwrap();
    assert_eq!(back, w);
    let mut bad: Vec<Tensor<f64>> = w.tensors().to_vec();
    bad.pop();
    assert!(DecoderWeights::from_tensors(w.config().clone(), bad).is_err());
}
