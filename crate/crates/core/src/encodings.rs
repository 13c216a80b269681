//! Point and direction encodings.
//!
//! A point `p` in the unit cube at normalized time `t` is embedded as the sum
//! of a multi-level spatio-temporal hash-grid feature (one grid per
//! axis-aligned plane, indexed by the projected coordinates and `t`) mapped
//! through a shared linear projector, and a bilinear sample of the per-frame
//! tri-plane feature maps. View directions use a two-octave sinusoidal
//! encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::gemm::{gemm, Layout};
use crate::diffkernel::{bilinear_taps, BackwardCtx, Graph, Op, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Width of the point embedding consumed by the MLP maps.
pub const POINT_FEATURES: usize = 32;
/// Width of the direction encoding.
pub const DIR_FEATURES: usize = 15;
/// Spatial hash multipliers for the `(u, v, t)` lattice.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Axis-aligned projection plane. The order `XY, XZ, YZ` is the channel-group
/// order used by every decoder head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Plane {
    XY,
    XZ,
    YZ,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::XY, Plane::XZ, Plane::YZ];

    /// Orthographic projection of a point onto the plane.
    #[inline]
    pub fn project<R: Copy>(self, p: [R; 3]) -> [R; 2] {
        match self {
            Plane::XY => [p[0], p[1]],
            Plane::XZ => [p[0], p[2]],
            Plane::YZ => [p[1], p[2]],
        }
    }

    pub fn index(self) -> usize {
        match self {
            Plane::XY => 0,
            Plane::XZ => 1,
            Plane::YZ => 2,
        }
    }
}

#[inline]
fn clamp01<R: Real>(x: R) -> R {
    x.max(R::zero()).min(R::one())
}

// ---------------------------------------------------------------------------
// Hash grids

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashConfig {
    pub levels: usize,
    /// Each level holds `2^log2_table_size` slots.
    pub log2_table_size: u32,
    pub features: usize,
    pub min_resolution: u32,
    pub max_resolution: u32,
}

impl Default for HashConfig {
    fn default() -> Self {
        HashConfig { levels: 19, log2_table_size: 16, features: 2, min_resolution: 16, max_resolution: 512 }
    }
}

impl HashConfig {
    pub fn table_size(&self) -> usize {
        1 << self.log2_table_size
    }

    /// Length of the concatenated per-level feature.
    pub fn encoded_len(&self) -> usize {
        self.levels * self.features
    }

    /// Reals stored by the three tables together.
    pub fn parameter_count(&self) -> usize {
        3 * self.levels * self.table_size() * self.features
    }

    /// Geometric progression from the minimum to the maximum resolution.
    pub fn resolutions(&self) -> Vec<u32> {
        if self.levels == 1 {
            return vec![self.min_resolution];
        }
        let (lo, hi) = (self.min_resolution as f64, self.max_resolution as f64);
        let growth = ((hi.ln() - lo.ln()) / (self.levels - 1) as f64).exp();
        (0..self.levels).map(|l| (lo * growth.powi(l as i32)).round() as u32).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features == 0 {
            return Err(Error::Config("hash grid needs at least one level and feature".into()));
        }
        if self.log2_table_size == 0 || self.log2_table_size > 26 {
            return Err(Error::Config(format!("log2 table size {} out of range", self.log2_table_size)));
        }
        if self.min_resolution == 0 || self.max_resolution < self.min_resolution {
            return Err(Error::Config("hash resolutions must satisfy 0 < min <= max".into()));
        }
        Ok(())
    }
}

/// Slot of a lattice vertex in a level table.
#[inline]
pub fn hash_slot(vertex: [u32; 3], table_size: usize) -> usize {
    let h = vertex[0].wrapping_mul(HASH_PRIMES[0])
        ^ vertex[1].wrapping_mul(HASH_PRIMES[1])
        ^ vertex[2].wrapping_mul(HASH_PRIMES[2]);
    h as usize & (table_size - 1)
}

/// Calls `f(plane, level, slot, weight)` for the 8 trilinear taps of every
/// level of every plane table.
#[inline]
fn for_each_hash_tap<R: Real>(
    resolutions: &[u32],
    table_size: usize,
    p: [R; 3],
    t: R,
    mut f: impl FnMut(usize, usize, usize, R),
) {
    let t = clamp01(t);
    for plane in Plane::ALL {
        let [u, v] = plane.project(p);
        let uvt = [clamp01(u), clamp01(v), t];
        for (level, &res) in resolutions.iter().enumerate() {
            let scale = R::lit(res as f64);
            let mut base = [0u32; 3];
            let mut frac = [R::zero(); 3];
            for a in 0..3 {
                let x = uvt[a] * scale;
                let fl = x.floor();
                base[a] = fl.to_u32().unwrap_or(0);
                frac[a] = x - fl;
            }
            for corner in 0..8u32 {
                let mut w = R::one();
                let mut vertex = base;
                for a in 0..3 {
                    if corner >> a & 1 == 1 {
                        vertex[a] += 1;
                        w *= frac[a];
                    } else {
                        w *= R::one() - frac[a];
                    }
                }
                f(plane.index(), level, hash_slot(vertex, table_size), w);
            }
        }
    }
}

/// The three plane-indexed hash tables, stored as one `[3, L, T, F]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct HashTableSet<R> {
    config: HashConfig,
    resolutions: Vec<u32>,
    tables: Tensor<R>,
}

impl<R: Real> HashTableSet<R> {
    pub fn zeros(config: HashConfig) -> Result<Self> {
        config.validate()?;
        let shape = [3, config.levels, config.table_size(), config.features];
        Ok(HashTableSet { resolutions: config.resolutions(), tables: Tensor::zeros(shape), config })
    }

    /// Entries drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn init(config: HashConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut set = Self::zeros(config)?;
        let shape = set.tables.shape().to_vec();
        set.tables = Tensor::uniform(shape, 1e-4, rng);
        Ok(set)
    }

    pub fn from_tensor(config: HashConfig, tables: Tensor<R>) -> Result<Self> {
        let mut set = Self::zeros(config)?;
        if tables.shape() != set.tables.shape() {
            return Err(Error::shape(
                "hash tables",
                format!("expected {:?}, got {:?}", set.tables.shape(), tables.shape()),
            ));
        }
        set.tables = tables;
        Ok(set)
    }

    pub fn config(&self) -> &HashConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn tensor(&self) -> &Tensor<R> {
        &self.tables
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<R> {
        &mut self.tables
    }

    /// Flat offset of `(plane, level, slot)` feature 0.
    #[inline]
    pub fn offset(&self, plane: usize, level: usize, slot: usize) -> usize {
        ((plane * self.config.levels + level) * self.config.table_size() + slot) * self.config.features
    }

    pub fn entry_mut(&mut self, plane: Plane, level: usize, slot: usize) -> &mut [R] {
        let off = self.offset(plane.index(), level, slot);
        let f = self.config.features;
        &mut self.tables.data_mut()[off..off + f]
    }

    /// Encodes one point; writes `L * F` values into `out`.
    pub fn encode_into(&self, p: [R; 3], t: R, out: &mut [R]) {
        encode_with(&self.config, &self.resolutions, self.tables.data(), p, t, out)
    }

    pub fn encode(&self, p: [R; 3], t: R) -> Vec<R> {
        let mut out = vec![R::zero(); self.config.encoded_len()];
        self.encode_into(p, t, &mut out);
        out
    }

    /// Encodes a batch into an `[N, L * F]` row-major buffer.
    pub fn encode_batch(&self, points: &[[R; 3]], t: R) -> Vec<R> {
        let width = self.config.encoded_len();
        let mut out = vec![R::zero(); points.len() * width];
        for (p, row) in points.iter().zip(out.chunks_exact_mut(width)) {
            self.encode_into(*p, t, row);
        }
        out
    }
}

fn encode_with<R: Real>(config: &HashConfig, resolutions: &[u32], table: &[R], p: [R; 3], t: R, out: &mut [R]) {
    out.iter_mut().for_each(|v| *v = R::zero());
    let (levels, tsize, nf) = (config.levels, config.table_size(), config.features);
    for_each_hash_tap(resolutions, tsize, p, t, |plane, level, slot, w| {
        let off = ((plane * levels + level) * tsize + slot) * nf;
        for f in 0..nf {
            out[level * nf + f] += w * table[off + f];
        }
    });
}

/// Hash encoding of a batch at one time, differentiable in the tables.
struct HashEncodeOp<R> {
    config: HashConfig,
    resolutions: Vec<u32>,
    points: Vec<[R; 3]>,
    t: R,
}

impl<R: Real> Op<R> for HashEncodeOp<R> {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let expected = [3, self.config.levels, self.config.table_size(), self.config.features];
        if inputs[0].shape() != expected {
            return Err(Error::shape("hash_encode", format!("tables {:?}, expected {expected:?}", inputs[0].shape())));
        }
        let width = self.config.encoded_len();
        let mut out = vec![R::zero(); self.points.len() * width];
        for (p, row) in self.points.iter().zip(out.chunks_exact_mut(width)) {
            encode_with(&self.config, &self.resolutions, inputs[0].data(), *p, self.t, row);
        }
        Tensor::new([self.points.len(), width], out)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Result<Vec<Option<Vec<R>>>> {
        let (levels, tsize, nf) = (self.config.levels, self.config.table_size(), self.config.features);
        let width = self.config.encoded_len();
        let mut dt = vec![R::zero(); ctx.inputs[0].numel()];
        for (n, p) in self.points.iter().enumerate() {
            let g = &ctx.grad[n * width..(n + 1) * width];
            for_each_hash_tap(&self.resolutions, tsize, *p, self.t, |plane, level, slot, w| {
                let off = ((plane * levels + level) * tsize + slot) * nf;
                for f in 0..nf {
                    dt[off + f] += w * g[level * nf + f];
                }
            });
        }
        Ok(vec![Some(dt)])
    }
}

// ---------------------------------------------------------------------------
// Tri-plane features

/// Three `C`-channel square feature maps stored channel-major as one
/// `[3 * C, R, R]` tensor in plane order XY, XZ, YZ.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneFeatures<R> {
    maps: Tensor<R>,
}

impl<R: Real> TriPlaneFeatures<R> {
    pub fn new(maps: Tensor<R>) -> Result<Self> {
        match maps.shape() {
            &[c, h, w] if c == 3 * POINT_FEATURES && h == w && h > 0 => Ok(TriPlaneFeatures { maps }),
            s => Err(Error::shape("tri-plane", format!("expected [{}, R, R], got {s:?}", 3 * POINT_FEATURES))),
        }
    }

    pub fn constant(resolution: usize, value: R) -> Self {
        TriPlaneFeatures { maps: Tensor::full([3 * POINT_FEATURES, resolution, resolution], value) }
    }

    pub fn resolution(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<R> {
        &self.maps
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<R> {
        &mut self.maps
    }

    pub fn sample_into(&self, p: [R; 3], out: &mut [R]) {
        triplane_sample_with(self.maps.data(), self.resolution(), p, out)
    }

    /// Sum of the bilinear samples of the three planes at `p`.
    pub fn sample(&self, p: [R; 3]) -> Vec<R> {
        let mut out = vec![R::zero(); POINT_FEATURES];
        self.sample_into(p, &mut out);
        out
    }
}

fn triplane_sample_with<R: Real>(maps: &[R], res: usize, p: [R; 3], out: &mut [R]) {
    out.iter_mut().for_each(|v| *v = R::zero());
    let plane_len = res * res;
    for plane in Plane::ALL {
        let [u, v] = plane.project(p);
        let taps = bilinear_taps(u, v, res, res);
        let group = plane.index() * POINT_FEATURES;
        for (c, o) in out.iter_mut().enumerate() {
            let base = (group + c) * plane_len;
            for &(i, w) in &taps {
                *o += w * maps[base + i];
            }
        }
    }
}

struct TriPlaneOp<R> {
    points: Vec<[R; 3]>,
}

impl<R: Real> Op<R> for TriPlaneOp<R> {
    fn name(&self) -> &'static str {
        "triplane_sample"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let maps = inputs[0];
        let res = match maps.shape() {
            &[c, h, w] if c == 3 * POINT_FEATURES && h == w && h > 0 => h,
            s => return Err(Error::shape("triplane_sample", format!("maps {s:?}"))),
        };
        let mut out = vec![R::zero(); self.points.len() * POINT_FEATURES];
        for (p, row) in self.points.iter().zip(out.chunks_exact_mut(POINT_FEATURES)) {
            triplane_sample_with(maps.data(), res, *p, row);
        }
        Tensor::new([self.points.len(), POINT_FEATURES], out)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Result<Vec<Option<Vec<R>>>> {
        let res = ctx.inputs[0].shape()[1];
        let plane_len = res * res;
        let mut dm = vec![R::zero(); ctx.inputs[0].numel()];
        for (n, p) in self.points.iter().enumerate() {
            let g = &ctx.grad[n * POINT_FEATURES..(n + 1) * POINT_FEATURES];
            for plane in Plane::ALL {
                let [u, v] = plane.project(*p);
                let taps = bilinear_taps(u, v, res, res);
                let group = plane.index() * POINT_FEATURES;
                for (c, &gc) in g.iter().enumerate() {
                    let base = (group + c) * plane_len;
                    for &(i, w) in &taps {
                        dm[base + i] += w * gc;
                    }
                }
            }
        }
        Ok(vec![Some(dm)])
    }
}

// ---------------------------------------------------------------------------
// Projector and the full point embedding

/// Bias-free linear map from the hash feature to [`POINT_FEATURES`].
/// Stored as an `[in, 32]` matrix applied as `x * W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProjector<R> {
    weight: Tensor<R>,
}

impl<R: Real> FeatureProjector<R> {
    /// Kaiming-uniform over the input fan-in.
    pub fn init(input: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        FeatureProjector { weight: Tensor::uniform([input, POINT_FEATURES], bound, rng) }
    }

    pub fn from_tensor(weight: Tensor<R>) -> Result<Self> {
        match weight.shape() {
            &[_, POINT_FEATURES] => Ok(FeatureProjector { weight }),
            s => Err(Error::shape("projector", format!("expected [in, {POINT_FEATURES}], got {s:?}"))),
        }
    }

    pub fn input_len(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor<R> {
        &self.weight
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<R> {
        &mut self.weight
    }

    /// Projects `[N, in]` rows into `[N, 32]`, accumulating into `out` when
    /// `accumulate` is set.
    pub fn project_into(&self, rows: &[R], out: &mut [R], accumulate: bool) {
        let n = rows.len() / self.input_len();
        gemm(
            R::one(),
            rows,
            Layout::row_major(n, self.input_len()),
            self.weight.data(),
            Layout::row_major(self.input_len(), POINT_FEATURES),
            if accumulate { R::one() } else { R::zero() },
            out,
            Layout::row_major(n, POINT_FEATURES),
        );
    }
}

/// `projector(hash_encode(p, t)) + triplane_sample(p)` for one point.
pub fn point_embed<R: Real>(
    tables: &HashTableSet<R>,
    projector: &FeatureProjector<R>,
    planes: &TriPlaneFeatures<R>,
    p: [R; 3],
    t: R,
) -> Vec<R> {
    embed_batch(tables, projector, planes, &[p], t)
}

/// Row-major `[N, 32]` embeddings of a batch at one time.
pub fn embed_batch<R: Real>(
    tables: &HashTableSet<R>,
    projector: &FeatureProjector<R>,
    planes: &TriPlaneFeatures<R>,
    points: &[[R; 3]],
    t: R,
) -> Vec<R> {
    let mut out = vec![R::zero(); points.len() * POINT_FEATURES];
    for (p, row) in points.iter().zip(out.chunks_exact_mut(POINT_FEATURES)) {
        planes.sample_into(*p, row);
    }
    let hashed = tables.encode_batch(points, t);
    projector.project_into(&hashed, &mut out, true);
    out
}

impl<R: Real> Graph<R> {
    /// Records the hash encoding of `points` at time `t`; `tables` is the
    /// `[3, L, T, F]` tensor of a [`HashTableSet`] with `config`.
    pub fn hash_encode(&mut self, tables: Var, config: &HashConfig, points: Vec<[R; 3]>, t: R) -> Result<Var> {
        let op = HashEncodeOp { resolutions: config.resolutions(), config: config.clone(), points, t };
        self.apply(op, &[tables])
    }

    /// Records the tri-plane sample of `points` from a `[96, R, R]` map.
    pub fn triplane_sample(&mut self, maps: Var, points: Vec<[R; 3]>) -> Result<Var> {
        self.apply(TriPlaneOp { points }, &[maps])
    }

    /// Records the full point embedding, `[N, 32]`.
    pub fn point_embed(
        &mut self,
        tables: Var,
        config: &HashConfig,
        projector: Var,
        planes: Var,
        points: Vec<[R; 3]>,
        t: R,
    ) -> Result<Var> {
        let hashed = self.hash_encode(tables, config, points.clone(), t)?;
        let projected = self.matmul(hashed, projector)?;
        let tri = self.triplane_sample(planes, points)?;
        self.add(projected, tri)
    }
}

// ---------------------------------------------------------------------------
// Directions

/// `[d, sin(pi d), cos(pi d), sin(2 pi d), cos(2 pi d)]`, 15 values.
///
/// Non-unit input is normalized and a warning is logged.
pub fn dir_encode<R: Real>(d: [R; 3]) -> [R; DIR_FEATURES] {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let d = if (norm - R::one()).abs() > R::lit(1e-6) {
        log::warn!("dir_encode: non-unit direction (|d| = {norm}), normalizing");
        [d[0] / norm, d[1] / norm, d[2] / norm]
    } else {
        d
    };
    let mut out = [R::zero(); DIR_FEATURES];
    out[..3].copy_from_slice(&d);
    let pi = R::lit(std::f64::consts::PI);
    for octave in 0..2 {
        let freq = pi * R::lit((1 << octave) as f64);
        for k in 0..3 {
            let a = freq * d[k];
            out[3 + octave * 6 + k] = a.sin();
            out[3 + octave * 6 + 3 + k] = a.cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_resolutions_span_16_to_512() {
        let r = HashConfig::default().resolutions();
        assert_eq!(r.len(), 19);
        assert_eq!(r[0], 16);
        assert_eq!(r[18], 512);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn hash_of_origin_is_zero() {
        assert_eq!(hash_slot([0, 0, 0], 1 << 16), 0);
        assert_eq!(hash_slot([3, 0, 0], 1 << 16), 3);
    }

    #[test]
    fn projection_axes() {
        let p = [1, 2, 3];
        assert_eq!(Plane::XY.project(p), [1, 2]);
        assert_eq!(Plane::XZ.project(p), [1, 3]);
        assert_eq!(Plane::YZ.project(p), [2, 3]);
    }
}
