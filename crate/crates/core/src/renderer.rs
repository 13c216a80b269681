//! Rays, point sampling, volume compositing and tiled image rendering.
//!
//! Geometry runs in `f64`; field values use the model precision.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{BackwardCtx, Graph, Op, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::occupancy::OccupancyVolume;

/// Stratified samples per training ray.
pub const TRAIN_SAMPLES: usize = 64;
/// Inference step is the box diagonal divided by this.
pub const INFER_STEPS_PER_DIAGONAL: f64 = 256.0;
/// Default color-skip weight threshold.
pub const DEFAULT_TAU2: f64 = 1e-3;

pub type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl SceneBounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|a| !(min[a] < max[a])) {
            return Err(Error::Geometry { op: "bounds", detail: format!("min {min:?} must be below max {max:?}") });
        }
        Ok(SceneBounds { min, max })
    }

    pub fn extent(&self) -> Vec3 {
        sub(self.max, self.min)
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        dot(e, e).sqrt()
    }

    pub fn center(&self) -> Vec3 {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Maps a world point to unit-cube coordinates.
    pub fn to_unit(&self, p: Vec3) -> Vec3 {
        [0, 1, 2].map(|a| (p[a] - self.min[a]) / (self.max[a] - self.min[a]))
    }

    /// Slab intersection; `None` on a miss.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if dir[a].abs() < 1e-300 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let t0 = (self.min[a] - origin[a]) / dir[a];
            let t1 = (self.max[a] - origin[a]) / dir[a];
            near = near.max(t0.min(t1));
            far = far.min(t0.max(t1));
        }
        let near = near.max(0.0);
        (near < far).then_some((near, far))
    }
}

/// Pinhole camera with OpenCV axes (x right, y down, z forward). Pixel
/// `(x, y)` is centered at continuous image coordinate `(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-from-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in world coordinates.
    pub translation: Vec3,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Geometry { op: "camera", detail: format!("focal lengths ({}, {}) must be positive", self.fx, self.fy) });
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Geometry { op: "camera", detail: "empty image".into() });
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::Geometry { op: "camera", detail: "rotation is not orthonormal".into() });
                }
            }
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y_deg: f64, width: u32, height: u32) -> Result<Self> {
        let forward = sub(target, eye);
        if dot(forward, forward) < 1e-24 {
            return Err(Error::Geometry { op: "look_at", detail: "eye equals target".into() });
        }
        let z = normalize(forward);
        let x = cross(z, up);
        if dot(x, x) < 1e-24 {
            return Err(Error::Geometry { op: "look_at", detail: "up is parallel to the view direction".into() });
        }
        let x = normalize(x);
        let y = cross(z, x);
        if !(fov_y_deg > 0.0 && fov_y_deg < 180.0) {
            return Err(Error::Geometry { op: "look_at", detail: format!("field of view {fov_y_deg} out of range") });
        }
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Ok(Camera {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            rotation: [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]],
            translation: eye,
        })
    }

    /// World-space unit direction through pixel `(x, y)`.
    pub fn direction(&self, x: f64, y: f64) -> Vec3 {
        let c = [(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0];
        let r = &self.rotation;
        normalize([0, 1, 2].map(|i| r[i][0] * c[0] + r[i][1] * c[1] + r[i][2] * c[2]))
    }

    /// Pixel coordinates of a world point, or `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let d = sub(p, self.translation);
        let r = &self.rotation;
        let c = [0, 1, 2].map(|j| (0..3).map(|i| r[i][j] * d[i]).sum::<f64>());
        (c[2] > 0.0).then(|| (self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
    pub hit: bool,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [0, 1, 2].map(|a| self.origin[a] + t * self.dir[a])
    }
}

/// One ray per pixel, clipped to `bounds`.
pub fn gen_rays(cam: &Camera, pixels: &[(u32, u32)], bounds: &SceneBounds) -> Result<Vec<Ray>> {
    cam.validate()?;
    pixels
        .iter()
        .map(|&(x, y)| {
            if x >= cam.width || y >= cam.height {
                return Err(Error::OutOfRange { what: "pixel", index: (y * cam.width + x) as usize, len: (cam.width * cam.height) as usize });
            }
            let dir = cam.direction(x as f64, y as f64);
            let origin = cam.translation;
            Ok(match bounds.intersect(origin, dir) {
                Some((near, far)) => Ray { origin, dir, near, far, hit: true },
                None => Ray { origin, dir, near: 0.0, far: 0.0, hit: false },
            })
        })
        .collect()
}

/// Every pixel in row-major order.
pub fn all_pixels(cam: &Camera) -> Vec<(u32, u32)> {
    (0..cam.height).flat_map(|y| (0..cam.width).map(move |x| (x, y))).collect()
}

/// Sample distances along a ray with the interval length each represents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// 64 stratified samples in `[near, far]`, one uniformly jittered in each
/// equal bin. Sample `i` owns the interval between the midpoints to its
/// neighbours (the first starts at `near`, the last ends at `far`), so the
/// deltas partition the segment.
pub fn sample_train(ray: &Ray, rng: &mut impl Rng) -> RaySamples {
    if !ray.hit {
        return RaySamples::default();
    }
    let bin = (ray.far - ray.near) / TRAIN_SAMPLES as f64;
    let t: Vec<f64> = (0..TRAIN_SAMPLES).map(|i| ray.near + (i as f64 + rng.gen::<f64>()) * bin).collect();
    let mut delta = Vec::with_capacity(TRAIN_SAMPLES);
    let mut start = ray.near;
    for i in 0..TRAIN_SAMPLES {
        let end = if i + 1 < TRAIN_SAMPLES { 0.5 * (t[i] + t[i + 1]) } else { ray.far };
        delta.push(end - start);
        start = end;
    }
    RaySamples { t, delta }
}

/// Fixed-step march at `diagonal / 256`, one sample at the middle of each
/// step (the last step is cut at `far`). With an occupancy volume only
/// samples in occupied voxels are kept.
pub fn sample_infer(ray: &Ray, bounds: &SceneBounds, occ: Option<&OccupancyVolume>) -> RaySamples {
    let mut out = RaySamples::default();
    if !ray.hit {
        return out;
    }
    let step = bounds.diagonal() / INFER_STEPS_PER_DIAGONAL;
    let n = ((ray.far - ray.near) / step).ceil() as usize;
    for i in 0..n {
        let a = ray.near + i as f64 * step;
        let b = (a + step).min(ray.far);
        if b <= a {
            break;
        }
        let t = 0.5 * (a + b);
        if occ.is_none_or(|o| o.query(ray.at(t))) {
            out.t.push(t);
            out.delta.push(b - a);
        }
    }
    out
}

/// Compositing result for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite<R> {
    pub color: [R; 3],
    pub weights: Vec<R>,
    pub opacity: R,
}

/// Sample weights `w_i = T_i (1 - exp(-sigma_i delta_i))`.
pub fn composite_weights<R: Real>(sigma: &[R], delta: &[R]) -> Result<Vec<R>> {
    if sigma.len() != delta.len() {
        return Err(Error::shape("composite", format!("{} densities vs {} deltas", sigma.len(), delta.len())));
    }
    let mut acc = R::zero();
    let mut out = Vec::with_capacity(sigma.len());
    for (&s, &d) in sigma.iter().zip(delta) {
        if s < R::zero() || d < R::zero() || !s.is_finite() || !d.is_finite() {
            return Err(Error::InvalidArgument(format!("composite needs finite non-negative sigma and delta, got {} and {}", s.as_f64(), d.as_f64())));
        }
        let a = s * d;
        out.push((-acc).exp() * (R::one() - (-a).exp()));
        acc += a;
    }
    Ok(out)
}

/// Front-to-back compositing against black.
pub fn composite<R: Real>(sigma: &[R], rgb: &[[R; 3]], delta: &[R]) -> Result<Composite<R>> {
    if rgb.len() != sigma.len() {
        return Err(Error::shape("composite", format!("{} densities vs {} colors", sigma.len(), rgb.len())));
    }
    let weights = composite_weights(sigma, delta)?;
    let mut color = [R::zero(); 3];
    let mut opacity = R::zero();
    for (w, c) in weights.iter().zip(rgb) {
        for k in 0..3 {
            color[k] += *w * c[k];
        }
        opacity += *w;
    }
    Ok(Composite { color, weights, opacity })
}

/// Batched compositing of many rays; inputs are `sigma [N]`, `rgb [N, 3]`,
/// output is `[rays, 4]` holding color and opacity.
struct CompositeOp<R> {
    offsets: Vec<usize>,
    delta: Vec<R>,
}

impl<R: Real> CompositeOp<R> {
    fn transmittance(&self, sigma: &[R], ray: usize) -> Vec<R> {
        // T_1 .. T_{n+1}
        let (a, b) = (self.offsets[ray], self.offsets[ray + 1]);
        let mut t = Vec::with_capacity(b - a + 1);
        let mut acc = R::zero();
        t.push(R::one());
        for i in a..b {
            acc += sigma[i] * self.delta[i];
            t.push((-acc).exp());
        }
        t
    }
}

impl<R: Real> Op<R> for CompositeOp<R> {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let (sigma, rgb) = (inputs[0], inputs[1]);
        let n = *self.offsets.last().unwrap();
        if sigma.shape() != [n] || rgb.shape() != [n, 3] || self.delta.len() != n {
            return Err(Error::shape("composite", format!("sigma {:?}, rgb {:?} for {n} samples", sigma.shape(), rgb.shape())));
        }
        if sigma.data().iter().any(|&s| s < R::zero()) || self.delta.iter().any(|&d| d < R::zero()) {
            return Err(Error::InvalidArgument("composite needs non-negative sigma and delta".into()));
        }
        let rays = self.offsets.len() - 1;
        let mut out = vec![R::zero(); rays * 4];
        for r in 0..rays {
            let t = self.transmittance(sigma.data(), r);
            let a = self.offsets[r];
            for i in 0..t.len() - 1 {
                let w = t[i] - t[i + 1];
                for k in 0..3 {
                    out[r * 4 + k] += w * rgb.data()[(a + i) * 3 + k];
                }
            }
            out[r * 4 + 3] = R::one() - t[t.len() - 1];
        }
        Tensor::new([rays, 4], out)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Result<Vec<Option<Vec<R>>>> {
        let (sigma, rgb) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let n = sigma.len();
        let mut gs = vec![R::zero(); n];
        let mut gc = vec![R::zero(); n * 3];
        for r in 0..self.offsets.len() - 1 {
            let g = &ctx.grad[r * 4..r * 4 + 4];
            let t = self.transmittance(sigma, r);
            let a = self.offsets[r];
            let m = t.len() - 1;
            // e_i = g_rgb . c_i + g_opacity; dL/da_k = T_{k+1} e_k - sum_{i>k} w_i e_i
            let mut suffix = R::zero();
            for i in (0..m).rev() {
                let c = &rgb[(a + i) * 3..(a + i) * 3 + 3];
                let e = g[0] * c[0] + g[1] * c[1] + g[2] * c[2] + g[3];
                let w = t[i] - t[i + 1];
                gs[a + i] = (t[i + 1] * e - suffix) * self.delta[a + i];
                suffix += w * e;
                for k in 0..3 {
                    gc[(a + i) * 3 + k] = w * g[k];
                }
            }
        }
        Ok(vec![ctx.needs[0].then_some(gs), ctx.needs[1].then_some(gc)])
    }
}

impl<R: Real> Graph<R> {
    /// Composites rays whose samples are laid out back to back; ray `r` owns
    /// samples `offsets[r]..offsets[r + 1]`. Returns `[rays, 4]`.
    pub fn composite(&mut self, sigma: Var, rgb: Var, offsets: Vec<usize>, delta: Vec<R>) -> Result<Var> {
        if offsets.is_empty() || offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("composite offsets must start at 0 and not decrease".into()));
        }
        self.apply(CompositeOp { offsets, delta }, &[sigma, rgb])
    }
}

// ---------------------------------------------------------------------------
// Fields and image rendering

/// A radiance field queried in two passes: density first, then color for a
/// subset of the same points.
pub trait Field: Sync {
    type Real: Real;
    /// Per-point state kept between the two passes.
    type Cache: Send;

    fn density(&self, points: &[Vec3]) -> Result<(Vec<Self::Real>, Self::Cache)>;

    /// Colors for `points[select[k]]` seen along `dirs[k]`.
    fn color(&self, points: &[Vec3], cache: &Self::Cache, select: &[usize], dirs: &[Vec3]) -> Result<Vec<[Self::Real; 3]>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub use_ess: bool,
    pub two_stage: bool,
    pub tau2: f64,
    pub tile: u32,
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { use_ess: true, two_stage: true, tau2: DEFAULT_TAU2, tile: 64, background: [0.0; 3] }
    }
}

/// Linear RGB in `[0, 1]` plus opacity, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<f32>,
    pub alpha: Vec<f32>,
}

impl Image {
    pub fn black(width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        Image { width, height, rgb: vec![0.0; n * 3], alpha: vec![0.0; n] }
    }

    fn quantize(v: f32) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    /// 8-bit PNG, RGB or RGBA.
    pub fn to_png(&self, with_alpha: bool) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, self.width, self.height);
            enc.set_color(if with_alpha { png::ColorType::Rgba } else { png::ColorType::Rgb });
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            let data: Vec<u8> = if with_alpha {
                self.rgb
                    .chunks_exact(3)
                    .zip(&self.alpha)
                    .flat_map(|(c, &a)| [c[0], c[1], c[2], a].map(Self::quantize))
                    .collect()
            } else {
                self.rgb.iter().map(|&v| Self::quantize(v)).collect()
            };
            w.write_image_data(&data)?;
        }
        Ok(bytes)
    }

    /// Decodes an 8-bit RGB or RGBA PNG; alpha defaults to 1.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut dec = png::Decoder::new(bytes);
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf)?;
        let (w, h) = (info.width, info.height);
        let n = (w * h) as usize;
        let mut img = Image::black(w, h);
        let ch = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(Error::InvalidArgument(format!("unsupported PNG color type {other:?}"))),
        };
        for i in 0..n {
            let px = &buf[i * ch..(i + 1) * ch];
            let f = |b: u8| b as f32 / 255.0;
            let (rgb, a) = match ch {
                1 => ([px[0]; 3], 255),
                2 => ([px[0]; 3], px[1]),
                3 => ([px[0], px[1], px[2]], 255),
                _ => ([px[0], px[1], px[2]], px[3]),
            };
            for k in 0..3 {
                img.rgb[i * 3 + k] = f(rgb[k]);
            }
            img.alpha[i] = f(a);
        }
        Ok(img)
    }

    /// Pixel values after 8-bit quantization, as stored in a PNG.
    pub fn quantized(&self) -> Image {
        let q = |v: &f32| Self::quantize(*v) as f32 / 255.0;
        Image { width: self.width, height: self.height, rgb: self.rgb.iter().map(q).collect(), alpha: self.alpha.iter().map(q).collect() }
    }
}

/// Peak signal-to-noise ratio of two RGB images in `[0, 1]`, in dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape("psnr", format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    let mse = a.rgb.iter().zip(&b.rgb).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.rgb.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Renders a full image. Tiles are independent, so the result does not
/// depend on the number of worker threads.
pub fn render_image<F: Field>(
    field: &F,
    cam: &Camera,
    bounds: &SceneBounds,
    options: &RenderOptions,
    occ: Option<&OccupancyVolume>,
) -> Result<Image> {
    cam.validate()?;
    if options.use_ess && occ.is_none() {
        return Err(Error::MissingOccupancy);
    }
    let occ = if options.use_ess { occ } else { None };
    let tile = options.tile.max(1);
    let mut tiles = Vec::new();
    for y0 in (0..cam.height).step_by(tile as usize) {
        for x0 in (0..cam.width).step_by(tile as usize) {
            tiles.push((x0, y0));
        }
    }
    let results: Vec<Result<(Vec<(u32, u32)>, Vec<[f64; 4]>)>> = tiles
        .par_iter()
        .map(|&(x0, y0)| {
            let pixels: Vec<(u32, u32)> = (y0..(y0 + tile).min(cam.height))
                .flat_map(|y| (x0..(x0 + tile).min(cam.width)).map(move |x| (x, y)))
                .collect();
            let rays = gen_rays(cam, &pixels, bounds)?;
            let out = render_rays(field, &rays, bounds, options, occ)?;
            Ok((pixels, out))
        })
        .collect();
    let mut img = Image::black(cam.width, cam.height);
    for r in results {
        let (pixels, out) = r?;
        for ((x, y), v) in pixels.into_iter().zip(out) {
            let i = (y * cam.width + x) as usize;
            for k in 0..3 {
                img.rgb[i * 3 + k] = (v[k] + (1.0 - v[3]) * options.background[k]) as f32;
            }
            img.alpha[i] = v[3] as f32;
        }
    }
    Ok(img)
}

/// Color and opacity for each ray using fixed-step sampling.
pub fn render_rays<F: Field>(
    field: &F,
    rays: &[Ray],
    bounds: &SceneBounds,
    options: &RenderOptions,
    occ: Option<&OccupancyVolume>,
) -> Result<Vec<[f64; 4]>> {
    let mut offsets = vec![0];
    let mut points = Vec::new();
    let mut deltas = Vec::new();
    let mut owner = Vec::new();
    for (r, ray) in rays.iter().enumerate() {
        let s = sample_infer(ray, bounds, occ);
        for (&t, &d) in s.t.iter().zip(&s.delta) {
            points.push(ray.at(t));
            deltas.push(<F::Real as Real>::lit(d));
            owner.push(r);
        }
        offsets.push(points.len());
    }
    let mut out = vec![[0.0; 4]; rays.len()];
    if points.is_empty() {
        return Ok(out);
    }
    let (sigma, cache) = field.density(&points)?;
    let mut weights = Vec::with_capacity(points.len());
    for r in 0..rays.len() {
        let (a, b) = (offsets[r], offsets[r + 1]);
        weights.extend(composite_weights(&sigma[a..b], &deltas[a..b])?);
    }
    let tau2 = <F::Real as Real>::lit(options.tau2);
    let select: Vec<usize> = (0..points.len()).filter(|&i| !options.two_stage || weights[i] > tau2).collect();
    let dirs: Vec<Vec3> = select.iter().map(|&i| rays[owner[i]].dir).collect();
    let colors = if select.is_empty() { Vec::new() } else { field.color(&points, &cache, &select, &dirs)? };
    for (&i, c) in select.iter().zip(&colors) {
        let o = &mut out[owner[i]];
        for k in 0..3 {
            o[k] += (weights[i] * c[k]).as_f64();
        }
    }
    for r in 0..rays.len() {
        out[r][3] = weights[offsets[r]..offsets[r + 1]].iter().map(|w| w.as_f64()).sum();
    }
    Ok(out)
}
