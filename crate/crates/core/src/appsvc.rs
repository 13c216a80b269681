//! Request types and the render path shared by the command line and the
//! HTTP service, plus the ESS timing harness.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffkernel::{Precision, Real};
use crate::error::{Error, Result};
use crate::hypernet::DecodeCache;
use crate::model::{Model, Renderable};
use crate::occupancy::{OccupancyVolume, DEFAULT_RESOLUTION, DEFAULT_TAU1};
use crate::renderer::{psnr, render_image, Camera, Image, RenderOptions, SceneBounds, Vec3};
use crate::scenekit::{checkpoint_from_bytes, checkpoint_header};

pub const DEFAULT_MAX_RESOLUTION: u32 = 1024;
pub const DEFAULT_FOV_DEG: f64 = 40.0;

/// Camera placement: either look-at or a full world-from-camera `[R | t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Pose {
    LookAt {
        position: Vec3,
        look_at: Vec3,
        #[serde(default = "z_up")]
        up: Vec3,
    },
    Extrinsics {
        extrinsics: [[f64; 4]; 3],
    },
}

fn z_up() -> Vec3 {
    [0.0, 0.0, 1.0]
}

fn yes() -> bool {
    true
}

fn default_fov() -> f64 {
    DEFAULT_FOV_DEG
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub frame: usize,
    pub pose: Pose,
    /// Vertical field of view in degrees.
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default = "yes")]
    pub use_ess: bool,
    #[serde(default = "yes")]
    pub two_stage: bool,
}

impl RenderRequest {
    pub fn camera(&self) -> Result<Camera> {
        match &self.pose {
            Pose::LookAt { position, look_at, up } => Camera::look_at(*position, *look_at, *up, self.fov_deg, self.width, self.height),
            Pose::Extrinsics { extrinsics: e } => {
                let f = 0.5 * self.height as f64 / (0.5 * self.fov_deg.to_radians()).tan();
                let cam = Camera {
                    fx: f,
                    fy: f,
                    cx: (self.width as f64 - 1.0) / 2.0,
                    cy: (self.height as f64 - 1.0) / 2.0,
                    width: self.width,
                    height: self.height,
                    rotation: [0, 1, 2].map(|i| [e[i][0], e[i][1], e[i][2]]),
                    translation: [e[0][3], e[1][3], e[2][3]],
                };
                cam.validate()?;
                Ok(cam)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefaultCamera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceMeta {
    pub frames: usize,
    pub bounds: SceneBounds,
    pub default_camera: DefaultCamera,
    pub model_id: String,
    pub max_resolution: u32,
    pub precision: Precision,
}

/// Camera on the +x side of the scene, slightly raised, framing the whole
/// box.
pub fn default_camera(bounds: &SceneBounds) -> DefaultCamera {
    let c = bounds.center();
    let r = 1.3 * bounds.diagonal();
    let elev = 15f64.to_radians();
    let half = (0.5 * bounds.diagonal() / r).asin().to_degrees();
    DefaultCamera {
        position: [c[0] + r * elev.cos(), c[1], c[2] + r * elev.sin()],
        look_at: c,
        up: [0.0, 0.0, 1.0],
        fov_deg: 2.0 * half * 1.05,
    }
}

/// FNV-1a digest, used as a stable model identifier.
pub fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceOptions {
    pub max_resolution: u32,
    pub tau1: f32,
    pub cache_frames: usize,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        ServiceOptions { max_resolution: DEFAULT_MAX_RESOLUTION, tau1: DEFAULT_TAU1, cache_frames: DecodeCache::<f32>::DEFAULT_CAPACITY }
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub png: Vec<u8>,
    pub millis: f64,
}

/// Renders requests against one loaded model, memoizing decoded frames and
/// occupancy volumes.
pub trait Service: Send + Sync {
    fn meta(&self) -> ServiceMeta;
    fn render(&self, req: &RenderRequest) -> Result<RenderOutput>;
    /// Supplies a prebuilt occupancy volume for its frame.
    fn insert_occupancy(&self, vol: OccupancyVolume);
    fn bench(&self, frames: &[usize], cam: &Camera, tau1: f32, repeats: usize) -> Result<BenchReport>;
}

pub struct ModelService<R: Real> {
    renderable: Renderable<R>,
    options: ServiceOptions,
    model_id: String,
    occupancy: Mutex<HashMap<usize, Arc<OccupancyVolume>>>,
}

impl<R: Real> ModelService<R> {
    pub fn new(model: Model<R>, model_id: String, options: ServiceOptions) -> Self {
        ModelService { renderable: Renderable::new(model, options.cache_frames), options, model_id, occupancy: Mutex::new(HashMap::new()) }
    }

    pub fn model(&self) -> &Model<R> {
        &self.renderable.model
    }

    pub fn occupancy(&self, frame: usize) -> Result<Arc<OccupancyVolume>> {
        if let Some(v) = self.occupancy.lock().unwrap().get(&frame) {
            return Ok(v.clone());
        }
        let vol = Arc::new(build_occupancy(&self.renderable, frame, self.options.tau1)?);
        self.occupancy.lock().unwrap().insert(frame, vol.clone());
        Ok(vol)
    }

    pub fn render_image(&self, req: &RenderRequest) -> Result<Image> {
        let model = &self.renderable.model;
        if req.frame >= model.frames() {
            return Err(Error::OutOfRange { what: "frame", index: req.frame, len: model.frames() });
        }
        let max = self.options.max_resolution;
        if req.width == 0 || req.height == 0 || req.width > max || req.height > max {
            return Err(Error::InvalidArgument(format!("resolution {}x{} outside 1..={max}", req.width, req.height)));
        }
        let cam = req.camera()?;
        let maps = self.renderable.maps(req.frame)?;
        let occ = if req.use_ess { Some(self.occupancy(req.frame)?) } else { None };
        let opts = RenderOptions { use_ess: req.use_ess, two_stage: req.two_stage, ..RenderOptions::default() };
        render_image(&model.field(&maps), &cam, model.bounds(), &opts, occ.as_deref())
    }
}

impl<R: Real> Service for ModelService<R> {
    fn meta(&self) -> ServiceMeta {
        let model = &self.renderable.model;
        ServiceMeta {
            frames: model.frames(),
            bounds: *model.bounds(),
            default_camera: default_camera(model.bounds()),
            model_id: self.model_id.clone(),
            max_resolution: self.options.max_resolution,
            precision: R::PRECISION,
        }
    }

    fn render(&self, req: &RenderRequest) -> Result<RenderOutput> {
        let t = Instant::now();
        let img = self.render_image(req)?;
        let png = img.to_png(false)?;
        Ok(RenderOutput { png, millis: t.elapsed().as_secs_f64() * 1e3 })
    }

    fn insert_occupancy(&self, vol: OccupancyVolume) {
        self.occupancy.lock().unwrap().insert(vol.frame(), Arc::new(vol));
    }

    fn bench(&self, frames: &[usize], cam: &Camera, tau1: f32, repeats: usize) -> Result<BenchReport> {
        bench(&self.renderable, frames, cam, tau1, repeats)
    }
}

/// Occupancy of one frame from the decoded density maps.
pub fn build_occupancy<R: Real>(renderable: &Renderable<R>, frame: usize, tau1: f32) -> Result<OccupancyVolume> {
    let model = &renderable.model;
    let maps = renderable.maps(frame)?;
    let field = model.field(&maps);
    OccupancyVolume::build_with(DEFAULT_RESOLUTION, *model.bounds(), frame, tau1, |p| field.density_f64(p))
}

/// Loads a checkpoint at its stored precision.
pub fn load_service(bytes: &[u8], options: ServiceOptions) -> Result<Arc<dyn Service>> {
    let id = digest(bytes);
    let (precision, _) = checkpoint_header(bytes)?;
    Ok(match precision {
        Precision::F32 => Arc::new(ModelService::new(checkpoint_from_bytes::<f32>(bytes)?, id, options)),
        Precision::F64 => Arc::new(ModelService::new(checkpoint_from_bytes::<f64>(bytes)?, id, options)),
    })
}

pub fn load_service_file(path: &Path, options: ServiceOptions) -> Result<Arc<dyn Service>> {
    load_service(&std::fs::read(path)?, options)
}

// ---------------------------------------------------------------------------
// Timing harness

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub frame: usize,
    pub ms_ess: f64,
    pub ms_full: f64,
    /// PSNR of the ESS render against the full render.
    pub psnr: f64,
    pub occupied_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: Vec<FrameTiming>,
    pub ms_per_frame_ess: f64,
    pub ms_per_frame_full: f64,
    pub speedup: f64,
    pub min_psnr: f64,
    pub tau1: f32,
    pub width: u32,
    pub height: u32,
}

/// Times ESS-on and ESS-off renders of each frame from `cam`, both with
/// two-stage evaluation. Decoding and occupancy builds happen before the
/// clock starts; each render is repeated `repeats` times and the fastest
/// run counts.
pub fn bench<R: Real>(renderable: &Renderable<R>, frames: &[usize], cam: &Camera, tau1: f32, repeats: usize) -> Result<BenchReport> {
    let model = &renderable.model;
    let mut out = Vec::new();
    for &frame in frames {
        let maps = renderable.maps(frame)?;
        let occ = build_occupancy(renderable, frame, tau1)?;
        let field = model.field(&maps);
        let time = |opts: &RenderOptions, occ: Option<&OccupancyVolume>| -> Result<(f64, Image)> {
            let mut best = f64::INFINITY;
            let mut img = None;
            for _ in 0..repeats.max(1) {
                let t = Instant::now();
                let i = render_image(&field, cam, model.bounds(), opts, occ)?;
                best = best.min(t.elapsed().as_secs_f64() * 1e3);
                img = Some(i);
            }
            Ok((best, img.unwrap()))
        };
        let (ms_full, full) = time(&RenderOptions { use_ess: false, ..Default::default() }, None)?;
        let (ms_ess, ess) = time(&RenderOptions::default(), Some(&occ))?;
        let n: usize = occ.resolution().iter().product();
        out.push(FrameTiming { frame, ms_ess, ms_full, psnr: psnr(&ess, &full)?, occupied_fraction: occ.occupied_count() as f64 / n as f64 });
    }
    let k = out.len().max(1) as f64;
    let ms_ess = out.iter().map(|f| f.ms_ess).sum::<f64>() / k;
    let ms_full = out.iter().map(|f| f.ms_full).sum::<f64>() / k;
    Ok(BenchReport {
        min_psnr: out.iter().map(|f| f.psnr).fold(f64::INFINITY, f64::min),
        frames: out,
        ms_per_frame_ess: ms_ess,
        ms_per_frame_full: ms_full,
        speedup: ms_full / ms_ess,
        tau1,
        width: cam.width,
        height: cam.height,
    })
}
