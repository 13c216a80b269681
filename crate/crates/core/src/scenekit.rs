//! Datasets, synthetic scenes with an analytic ground-truth renderer, and
//! checkpoints.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{Precision, Real, Tensor};
use crate::encodings::{FeatureProjector, HashTableSet};
use crate::error::{Error, Result};
use crate::hypernet::{DecoderWeights, LatentTable};
use crate::model::{Model, ModelConfig};
use crate::renderer::{gen_rays, Camera, Image, Ray, SceneBounds, Vec3, INFER_STEPS_PER_DIAGONAL};

// ---------------------------------------------------------------------------
// Manifest and dataset

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    None,
    /// Masks ride in the alpha channel of each image.
    Alpha,
    /// Separate grayscale PNGs listed in `masks`.
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub name: String,
    pub width: u32,
    pub height: u32,
    /// `[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`.
    pub intrinsics: [[f64; 3]; 3],
    /// World-from-camera `[R | t]`, where `t` is the camera center.
    pub extrinsics: [[f64; 4]; 3],
}

impl CameraRecord {
    pub fn from_camera(name: impl Into<String>, cam: &Camera) -> Self {
        let r = cam.rotation;
        let t = cam.translation;
        CameraRecord {
            name: name.into(),
            width: cam.width,
            height: cam.height,
            intrinsics: [[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]],
            extrinsics: [0, 1, 2].map(|i| [r[i][0], r[i][1], r[i][2], t[i]]),
        }
    }

    pub fn camera(&self) -> Camera {
        let k = self.intrinsics;
        let e = self.extrinsics;
        Camera {
            fx: k[0][0],
            fy: k[1][1],
            cx: k[0][2],
            cy: k[1][2],
            width: self.width,
            height: self.height,
            rotation: [0, 1, 2].map(|i| [e[i][0], e[i][1], e[i][2]]),
            translation: [e[0][3], e[1][3], e[2][3]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub frames: usize,
    pub bounds: SceneBounds,
    pub cameras: Vec<CameraRecord>,
    /// `images[frame][camera]`, relative to the dataset root.
    pub images: Vec<Vec<String>>,
    pub mask_source: MaskSource,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masks: Vec<Vec<String>>,
}

/// A loaded dataset. Images keep their mask in `alpha`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub cameras: Vec<Camera>,
    pub images: Vec<Vec<Image>>,
}

impl Dataset {
    pub fn frames(&self) -> usize {
        self.manifest.frames
    }

    pub fn bounds(&self) -> &SceneBounds {
        &self.manifest.bounds
    }

    pub fn has_masks(&self) -> bool {
        self.manifest.mask_source != MaskSource::None
    }

    pub fn time(&self, frame: usize) -> f64 {
        if self.frames() <= 1 {
            0.0
        } else {
            frame as f64 / (self.frames() - 1) as f64
        }
    }
}

fn dataset_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), detail: detail.into() }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| dataset_err(&mpath, e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| dataset_err(&mpath, e.to_string()))?;
    if manifest.version != 1 {
        return Err(dataset_err(&mpath, format!("unsupported manifest version {}", manifest.version)));
    }
    SceneBounds::new(manifest.bounds.min, manifest.bounds.max).map_err(|e| dataset_err(&mpath, e.to_string()))?;
    if manifest.images.len() != manifest.frames {
        return Err(dataset_err(&mpath, format!("{} image rows for {} frames", manifest.images.len(), manifest.frames)));
    }
    if manifest.mask_source == MaskSource::Files && manifest.masks.len() != manifest.frames {
        return Err(dataset_err(&mpath, "masks declared as files but the mask table does not cover every frame"));
    }
    let mut cameras = Vec::new();
    for rec in &manifest.cameras {
        let cam = rec.camera();
        cam.validate().map_err(|e| dataset_err(&mpath, format!("camera {}: {e}", rec.name)))?;
        cameras.push(cam);
    }
    let mut images = Vec::with_capacity(manifest.frames);
    for (f, row) in manifest.images.iter().enumerate() {
        if row.len() != cameras.len() {
            return Err(dataset_err(&mpath, format!("frame {f} lists {} images for {} cameras", row.len(), cameras.len())));
        }
        let mut frame = Vec::with_capacity(row.len());
        for (c, rel) in row.iter().enumerate() {
            let path = root.join(rel);
            let bytes = fs::read(&path).map_err(|e| dataset_err(&path, e.to_string()))?;
            let mut img = Image::from_png(&bytes).map_err(|e| dataset_err(&path, e.to_string()))?;
            let cam = &cameras[c];
            if (img.width, img.height) != (cam.width, cam.height) {
                return Err(dataset_err(
                    &path,
                    format!("image is {}x{} but camera {} is {}x{}", img.width, img.height, manifest.cameras[c].name, cam.width, cam.height),
                ));
            }
            match manifest.mask_source {
                MaskSource::None => img.alpha.fill(1.0),
                MaskSource::Alpha => {}
                MaskSource::Files => {
                    let mrel = manifest.masks[f].get(c).ok_or_else(|| dataset_err(&mpath, format!("no mask for frame {f} camera {c}")))?;
                    let mpath = root.join(mrel);
                    let bytes = fs::read(&mpath).map_err(|e| dataset_err(&mpath, format!("mask: {e}")))?;
                    let mask = Image::from_png(&bytes).map_err(|e| dataset_err(&mpath, e.to_string()))?;
                    if (mask.width, mask.height) != (img.width, img.height) {
                        return Err(dataset_err(&mpath, "mask resolution differs from its image"));
                    }
                    img.alpha = mask.rgb.chunks_exact(3).map(|c| c[0]).collect();
                }
            }
            frame.push(img);
        }
        images.push(frame);
    }
    Ok(Dataset { root: root.to_path_buf(), manifest, cameras, images })
}

/// Writes the manifest and every image (RGBA when masks ride in alpha).
pub fn write_dataset(root: &Path, manifest: &Manifest, images: &[Vec<Image>]) -> Result<()> {
    fs::create_dir_all(root)?;
    for (row, imgs) in manifest.images.iter().zip(images) {
        for (rel, img) in row.iter().zip(imgs) {
            let path = root.join(rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&path, img.to_png(manifest.mask_source == MaskSource::Alpha)?)?;
        }
    }
    fs::write(root.join(MANIFEST), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Cuboid { half: Vec3 },
}

/// A constant-density solid moving linearly in normalized time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub velocity: Vec3,
    pub sigma: f64,
    pub color: [f64; 3],
}

impl Primitive {
    pub fn center_at(&self, t: f64) -> Vec3 {
        [0, 1, 2].map(|a| self.center[a] + self.velocity[a] * t)
    }

    pub fn contains(&self, p: Vec3, t: f64) -> bool {
        let c = self.center_at(t);
        let d = [0, 1, 2].map(|a| p[a] - c[a]);
        match self.shape {
            Shape::Sphere { radius } => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] < radius * radius,
            Shape::Cuboid { half } => (0..3).all(|a| d[a].abs() < half[a]),
        }
    }

    /// Entry and exit distances along a ray.
    fn span(&self, ray: &Ray, t: f64) -> Option<(f64, f64)> {
        let c = self.center_at(t);
        match self.shape {
            Shape::Sphere { radius } => {
                let o = [0, 1, 2].map(|a| ray.origin[a] - c[a]);
                let b: f64 = (0..3).map(|a| o[a] * ray.dir[a]).sum();
                let cc: f64 = (0..3).map(|a| o[a] * o[a]).sum::<f64>() - radius * radius;
                let disc = b * b - cc;
                (disc > 0.0).then(|| (-b - disc.sqrt(), -b + disc.sqrt()))
            }
            Shape::Cuboid { half } => {
                let lo = [0, 1, 2].map(|a| c[a] - half[a]);
                let hi = [0, 1, 2].map(|a| c[a] + half[a]);
                SceneBounds { min: lo, max: hi }.intersect(ray.origin, ray.dir)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub bounds: SceneBounds,
    pub primitives: Vec<Primitive>,
    /// Darkens colors for rays travelling downwards.
    pub view_tint: bool,
}

impl SyntheticScene {
    pub fn empty(bounds: SceneBounds) -> Self {
        SyntheticScene { bounds, primitives: Vec::new(), view_tint: false }
    }

    /// A sphere, a box and a smaller sphere with seeded colors, placements
    /// and motions, all inside the default toy bounds.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = toy_bounds();
        let mut jitter = |s: f64| rng.gen_range(-s..s);
        let layout = [
            (Shape::Sphere { radius: 0.3 }, [0.0, 0.0, 0.35]),
            (Shape::Cuboid { half: [0.18, 0.18, 0.3] }, [0.0, 0.0, -0.4]),
            (Shape::Sphere { radius: 0.16 }, [0.25, 0.2, -0.05]),
        ];
        let palette = [[0.9, 0.25, 0.2], [0.2, 0.55, 0.9], [0.95, 0.85, 0.2], [0.3, 0.8, 0.35], [0.8, 0.4, 0.85]];
        let mut primitives = Vec::new();
        for (k, (shape, c)) in layout.into_iter().enumerate() {
            let center = [c[0] + jitter(0.05), c[1] + jitter(0.05), c[2] + jitter(0.05)];
            let velocity = [jitter(0.1), jitter(0.1), jitter(0.1)];
            let color = palette[(seed as usize + k) % palette.len()];
            primitives.push(Primitive { shape, center, velocity, sigma: 30.0, color });
        }
        SyntheticScene { bounds, primitives, view_tint: false }
    }

    /// Density and color at a point; overlapping primitives add densities
    /// and mix colors by density.
    pub fn field(&self, p: Vec3, t: f64, dir: Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for prim in &self.primitives {
            if prim.contains(p, t) {
                sigma += prim.sigma;
                for k in 0..3 {
                    rgb[k] += prim.sigma * prim.color[k];
                }
            }
        }
        if sigma > 0.0 {
            let tint = if self.view_tint { 0.85 + 0.15 * dir[2] } else { 1.0 };
            rgb = rgb.map(|c| tint * c / sigma);
        }
        (sigma, rgb)
    }
}

/// Toy scene box: taller along z.
pub fn toy_bounds() -> SceneBounds {
    SceneBounds { min: [-0.6, -0.6, -1.0], max: [0.6, 0.6, 1.0] }
}

/// Front-to-back compositing with a running transmittance product.
pub fn oracle_composite(sigma: &[f64], rgb: &[[f64; 3]], delta: &[f64]) -> ([f64; 3], f64) {
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    for ((&s, c), &d) in sigma.iter().zip(rgb).zip(delta) {
        let alpha = 1.0 - (-s * d).exp();
        for k in 0..3 {
            color[k] += trans * alpha * c[k];
        }
        trans *= 1.0 - alpha;
    }
    (color, 1.0 - trans)
}

/// Ground-truth color and opacity of one ray. The ray is cut at every
/// primitive boundary so each piece has constant density and color, and
/// each piece is then stepped at `diagonal / (256 * step_factor)`.
pub fn oracle_ray(scene: &SyntheticScene, ray: &Ray, time: f64, step_factor: f64) -> ([f64; 3], f64) {
    if !ray.hit {
        return ([0.0; 3], 0.0);
    }
    let step = scene.bounds.diagonal() / (INFER_STEPS_PER_DIAGONAL * step_factor.max(1.0));
    let mut cuts = vec![ray.near, ray.far];
    for prim in &scene.primitives {
        if let Some((a, b)) = prim.span(ray, time) {
            cuts.extend([a, b].into_iter().filter(|&t| t > ray.near && t < ray.far));
        }
    }
    cuts.sort_by(f64::total_cmp);
    let (mut sigma, mut rgb, mut delta) = (Vec::new(), Vec::new(), Vec::new());
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let (s, c) = scene.field(ray.at(0.5 * (a + b)), time, ray.dir);
        let n = ((b - a) / step).ceil().max(1.0) as usize;
        for _ in 0..n {
            sigma.push(s);
            rgb.push(c);
            delta.push((b - a) / n as f64);
        }
    }
    oracle_composite(&sigma, &rgb, &delta)
}

/// Ground-truth image; opacity lands in `alpha`.
pub fn oracle_render(scene: &SyntheticScene, cam: &Camera, time: f64, step_factor: f64) -> Result<Image> {
    let pixels = crate::renderer::all_pixels(cam);
    let rays = gen_rays(cam, &pixels, &scene.bounds)?;
    let mut img = Image::black(cam.width, cam.height);
    for (i, ray) in rays.iter().enumerate() {
        let (c, a) = oracle_ray(scene, ray, time, step_factor);
        for k in 0..3 {
            img.rgb[i * 3 + k] = c[k] as f32;
        }
        img.alpha[i] = a as f32;
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub frames: usize,
    pub cameras: usize,
    pub resolution: u32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn toy() -> Self {
        SyntheticSpec { frames: 3, cameras: 12, resolution: 128, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras < 2 || self.frames == 0 || self.resolution == 0 {
            return Err(Error::Config(format!(
                "synthetic spec needs >= 2 cameras, >= 1 frame and a positive resolution, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Camera `k` of the ring. Fractional `k` places a camera between the
    /// training views.
    pub fn ring_camera(&self, bounds: &SceneBounds, k: f64) -> Result<Camera> {
        let az = std::f64::consts::TAU * k / self.cameras as f64;
        let elev = (if (k as i64) % 2 == 0 { 15.0f64 } else { -5.0f64 }).to_radians();
        let radius = 1.3 * bounds.diagonal();
        let c = bounds.center();
        let eye = [c[0] + radius * elev.cos() * az.cos(), c[1] + radius * elev.cos() * az.sin(), c[2] + radius * elev.sin()];
        let half = (0.5 * bounds.diagonal() / radius).asin().to_degrees();
        Camera::look_at(eye, c, [0.0, 0.0, 1.0], 2.0 * half * 1.05, self.resolution, self.resolution)
    }
}

/// Renders the scene from a camera ring and writes a dataset with masks in
/// the alpha channel.
pub fn gen_synthetic(scene: &SyntheticScene, spec: &SyntheticSpec, root: &Path) -> Result<Dataset> {
    spec.validate()?;
    let cams: Vec<Camera> = (0..spec.cameras).map(|k| spec.ring_camera(&scene.bounds, k as f64)).collect::<Result<_>>()?;
    let mut images = Vec::with_capacity(spec.frames);
    let mut names = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let time = if spec.frames <= 1 { 0.0 } else { f as f64 / (spec.frames - 1) as f64 };
        let mut row = Vec::new();
        let mut row_names = Vec::new();
        for (c, cam) in cams.iter().enumerate() {
            row.push(oracle_render(scene, cam, time, 4.0)?.quantized());
            row_names.push(format!("images/f{f:03}_c{c:02}.png"));
        }
        images.push(row);
        names.push(row_names);
    }
    let manifest = Manifest {
        version: 1,
        frames: spec.frames,
        bounds: scene.bounds,
        cameras: cams.iter().enumerate().map(|(k, c)| CameraRecord::from_camera(format!("cam{k:02}"), c)).collect(),
        images: names,
        mask_source: MaskSource::Alpha,
        masks: Vec::new(),
    };
    write_dataset(root, &manifest, &images)?;
    fs::write(root.join("scene.json"), serde_json::to_string_pretty(scene)?)?;
    Ok(Dataset { root: root.to_path_buf(), manifest, cameras: cams, images })
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 8] = b"MLPMCKPT";
pub const CKPT_VERSION: u32 = 1;

fn named_tensors<R: Real>(model: &Model<R>) -> Vec<(String, &Tensor<R>)> {
    let mut out = vec![
        ("latents".to_string(), model.latents.tensor()),
        ("hash".to_string(), model.hash.tensor()),
        ("projector".to_string(), model.projector.tensor()),
    ];
    out.extend(model.decoder.named().map(|(n, t)| (format!("decoder.{n}"), t)));
    out
}

pub fn checkpoint_bytes<R: Real>(model: &Model<R>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(R::PRECISION.tag());
    let config = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let tensors = named_tensors(model);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save_checkpoint<R: Real>(model: &Model<R>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("checkpoint", format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Header of a checkpoint: stored precision and config.
pub fn checkpoint_header(bytes: &[u8]) -> Result<(Precision, ModelConfig)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8).map_err(|_| Error::format("checkpoint", "bad magic"))? != CKPT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let tag = cur.u8()?;
    let precision = Precision::from_tag(tag).ok_or_else(|| Error::format("checkpoint", format!("unknown precision tag {tag}")))?;
    let len = cur.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(len)?)?;
    Ok((precision, config))
}

/// Reads a checkpoint written at precision `R`.
pub fn checkpoint_from_bytes<R: Real>(bytes: &[u8]) -> Result<Model<R>> {
    let (precision, config) = checkpoint_header(bytes)?;
    if precision != R::PRECISION {
        return Err(Error::format("checkpoint", format!("stored as {precision:?}, requested {:?}", R::PRECISION)));
    }
    let mut cur = Cursor { bytes, pos: 0 };
    cur.take(8 + 4 + 1)?;
    let len = cur.u32()? as usize;
    cur.take(len)?;

    // expected layout from the config echo
    let template = Model::<R>::from_parts(
        config.clone(),
        DecoderWeights::from_tensors(
            config.decoder.clone(),
            config.decoder.layer_shapes().into_iter().map(|(_, s)| Tensor::zeros(s)).collect(),
        )?,
        LatentTable::from_tensor(Tensor::zeros([config.frames, config.decoder.latent_dim]))?,
        HashTableSet::zeros(config.hash.clone())?,
        FeatureProjector::from_tensor(Tensor::zeros([config.hash.encoded_len(), crate::encodings::POINT_FEATURES]))?,
    )?;
    let expected: Vec<(String, Vec<usize>)> =
        named_tensors(&template).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    drop(template);

    let count = cur.u32()? as usize;
    if count != expected.len() {
        return Err(Error::format("checkpoint", format!("{count} tensors stored, config implies {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let nlen = cur.u16()? as usize;
        let name = String::from_utf8_lossy(cur.take(nlen)?).into_owned();
        if &name != want_name {
            return Err(Error::format("checkpoint", format!("expected tensor {want_name}, found {name}")));
        }
        let ndim = cur.u8()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        if &shape != want_shape {
            return Err(Error::format("checkpoint", format!("{name}: shape {shape:?}, config implies {want_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * R::PRECISION.bytes())?;
        let data: Vec<R> = raw.chunks_exact(R::PRECISION.bytes()).map(R::read_le).collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format("checkpoint", format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let mut it = tensors.into_iter();
    let latents = LatentTable::from_tensor(it.next().unwrap())?;
    let hash = HashTableSet::from_tensor(config.hash.clone(), it.next().unwrap())?;
    let projector = FeatureProjector::from_tensor(it.next().unwrap())?;
    let decoder = DecoderWeights::from_tensors(config.decoder.clone(), it.collect())?;
    Model::from_parts(config, decoder, latents, hash, projector)
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<Model<R>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}
