use std::fs;

use mlpmaps::diffkernel::Precision;
use mlpmaps::hypernet::DecoderConfig;
use mlpmaps::model::{Model, ModelConfig};
use mlpmaps::renderer::*;
use mlpmaps::scenekit::*;
use mlpmaps::Error;

fn tiny_spec(frames: usize, cameras: usize) -> SyntheticSpec {
    SyntheticSpec { frames, cameras, resolution: 16, seed: 3 }
}

#[test]
fn synthetic_dataset_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SyntheticScene::random(3);
    let ds = gen_synthetic(&scene, &tiny_spec(3, 4), dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.manifest, ds.manifest);
    assert_eq!(loaded.manifest.images.iter().map(Vec::len).sum::<usize>(), 12);
    assert_eq!(loaded.images, ds.images);
    for (cam, rec) in loaded.cameras.iter().zip(&ds.manifest.cameras) {
        assert_eq!(cam, &rec.camera());
        let (u, v) = cam.project(loaded.bounds().center()).unwrap();
        assert!(u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64);
    }
    assert!(loaded.has_masks());
    assert_eq!(loaded.time(2), 1.0);

    let again = tempfile::tempdir().unwrap();
    gen_synthetic(&scene, &tiny_spec(3, 4), again.path()).unwrap();
    for row in &ds.manifest.images {
        for rel in row {
            assert_eq!(fs::read(dir.path().join(rel)).unwrap(), fs::read(again.path().join(rel)).unwrap());
        }
    }
}

#[test]
fn toy_dataset_counts_images() {
    let spec = SyntheticSpec::toy();
    assert_eq!((spec.frames, spec.cameras, spec.resolution), (3, 12, 128));
    let dir = tempfile::tempdir().unwrap();
    let small = SyntheticSpec { resolution: 8, ..spec };
    gen_synthetic(&SyntheticScene::random(0), &small, dir.path()).unwrap();
    let n = fs::read_dir(dir.path().join("images")).unwrap().count();
    assert_eq!(n, 36);
}

#[test]
fn empty_scene_is_black() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_synthetic(&SyntheticScene::empty(toy_bounds()), &tiny_spec(1, 2), dir.path()).unwrap();
    for img in ds.images.iter().flatten() {
        assert!(img.rgb.iter().all(|&v| v == 0.0) && img.alpha.iter().all(|&a| a == 0.0));
    }
    assert!(gen_synthetic(&SyntheticScene::empty(toy_bounds()), &tiny_spec(1, 1), dir.path()).is_err());
}

#[test]
fn dataset_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_synthetic(&SyntheticScene::random(1), &tiny_spec(1, 2), dir.path()).unwrap();
    let write = |m: &Manifest| fs::write(dir.path().join(MANIFEST), serde_json::to_string(m).unwrap()).unwrap();

    let mut m = ds.manifest.clone();
    m.images[0][1] = "images/nope.png".into();
    write(&m);
    match load_dataset(dir.path()) {
        Err(Error::Dataset { path, .. }) => assert!(path.ends_with("images/nope.png")),
        other => panic!("{other:?}"),
    }

    let mut m = ds.manifest.clone();
    m.mask_source = MaskSource::Files;
    write(&m);
    assert!(load_dataset(dir.path()).is_err());
    m.masks = vec![vec!["masks/a.png".into(), "masks/b.png".into()]];
    write(&m);
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("masks/a.png"), "{err}");

    let mut m = ds.manifest.clone();
    m.cameras[0].extrinsics[0][0] = 2.0;
    write(&m);
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("orthonormal"), "{err}");

    let mut m = ds.manifest.clone();
    m.cameras[1].width = 17;
    write(&m);
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("16x16"), "{err}");
}

fn box_scene(sigma: f64) -> SyntheticScene {
    let bounds = SceneBounds::new([-1.0; 3], [1.0; 3]).unwrap();
    let prim = Primitive { shape: Shape::Cuboid { half: [1.0; 3] }, center: [0.0; 3], velocity: [0.0; 3], sigma, color: [1.0, 0.5, 0.25] };
    SyntheticScene { bounds, primitives: vec![prim], view_tint: false }
}

#[test]
fn oracle_homogeneous_box() {
    let scene = box_scene(1.3);
    let cam = Camera::look_at([2.5, 1.0, 0.7], [0.0; 3], [0.0, 0.0, 1.0], 60.0, 24, 24).unwrap();
    let rays = gen_rays(&cam, &all_pixels(&cam), &scene.bounds).unwrap();
    let img = oracle_render(&scene, &cam, 0.0, 4.0).unwrap();
    for (ray, &a) in rays.iter().zip(&img.alpha) {
        let want = if ray.hit { 1.0 - (-1.3 * (ray.far - ray.near)).exp() } else { 0.0 };
        assert!((a as f64 - want).abs() < 1e-4);
    }
    let black = oracle_render(&box_scene(0.0), &cam, 0.0, 4.0).unwrap();
    assert!(black.rgb.iter().all(|&v| v == 0.0));
}

#[test]
fn oracle_self_convergence() {
    let scene = SyntheticScene::random(5);
    let spec = SyntheticSpec { resolution: 32, ..SyntheticSpec::toy() };
    let cam = spec.ring_camera(&scene.bounds, 1.3).unwrap();
    let a = oracle_render(&scene, &cam, 0.5, 4.0).unwrap();
    let b = oracle_render(&scene, &cam, 0.5, 8.0).unwrap();
    let worst = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn oracle_and_engine_compositors_agree() {
    let sigma = [0.0, 3.0, 12.0, 0.5, 40.0, 1.0];
    let rgb = [[0.1, 0.2, 0.3], [0.9, 0.1, 0.0], [0.5, 0.5, 0.5], [0.0, 1.0, 0.2], [0.3, 0.3, 0.9], [1.0, 1.0, 1.0]];
    let delta = [0.05, 0.02, 0.1, 0.3, 0.01, 0.2];
    let (c, o) = oracle_composite(&sigma, &rgb, &delta);
    let e = composite(&sigma, &rgb, &delta).unwrap();
    assert!((o - e.opacity).abs() < 1e-6);
    for k in 0..3 {
        assert!((c[k] - e.color[k]).abs() < 1e-6);
    }
}

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::toy(2, toy_bounds());
    c.decoder = DecoderConfig::shrunk(32).unwrap();
    c.hash.log2_table_size = 8;
    c.precision = Precision::F64;
    c
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f64>::init(tiny_config()).unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&model, &p1).unwrap();
    let back: Model<f64> = load_checkpoint(&p1).unwrap();
    assert_eq!(back, model);
    save_checkpoint(&back, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    let (prec, cfg) = checkpoint_header(&fs::read(&p1).unwrap()).unwrap();
    assert_eq!((prec, cfg), (Precision::F64, model.config.clone()));
    assert!(load_checkpoint::<f32>(&p1).is_err());
}

#[test]
fn checkpoint_rejects_corruption() {
    let model = Model::<f64>::init(tiny_config()).unwrap();
    let bytes = checkpoint_bytes(&model).unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(checkpoint_from_bytes::<f64>(&bad).unwrap_err().to_string().contains("magic"));
    let mut bad = bytes.clone();
    bad[8] = 7;
    assert!(checkpoint_from_bytes::<f64>(&bad).unwrap_err().to_string().contains("version"));
    assert!(checkpoint_from_bytes::<f64>(&bytes[..bytes.len() - 3]).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(checkpoint_from_bytes::<f64>(&longer).is_err());

    // a config echo that disagrees with the stored tensors
    let cfg_len = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let mut other = model.config.clone();
    other.frames = 3;
    let other_json = serde_json::to_vec(&other).unwrap();
    let mut spliced = bytes[..13].to_vec();
    spliced.extend_from_slice(&(other_json.len() as u32).to_le_bytes());
    spliced.extend_from_slice(&other_json);
    spliced.extend_from_slice(&bytes[17 + cfg_len..]);
    let err = checkpoint_from_bytes::<f64>(&spliced).unwrap_err().to_string();
    assert!(err.contains("latents"), "{err}");
}

#[test]
fn default_hash_payload_size() {
    let c = ModelConfig::full(1, toy_bounds());
    assert_eq!(c.hash.parameter_count(), 3 * 19 * 65536 * 2);
}
