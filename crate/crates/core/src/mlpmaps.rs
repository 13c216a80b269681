//! MLP maps: 2D grids whose cells hold the weights of tiny per-region MLPs.
//!
//! A point selects one cell per plane by orthographic projection and binning.
//! The density head is a single bias-free `32 -> 1` layer; the color head is
//! `32 -> 32 -> (32 + 15) -> 32 -> 3`, bias-free, with ReLU between layers.
//! Outputs of the per-plane MLPs are summed before the final softplus
//! (density) or sigmoid (color).
//!
//! Batched color evaluation partitions points by cell and runs each cell's
//! MLP over blocks of its points with the weights held in cache, then
//! scatters results back to input order. Density is a gather and a dot
//! product per point.

use serde::{Deserialize, Serialize};

use crate::diffkernel::gemm::{gemm, Layout};
use crate::diffkernel::{relu, sigmoid, softplus, BackwardCtx, Graph, Op, Real, Tensor, Var};
use crate::encodings::{Plane, DIR_FEATURES, POINT_FEATURES};
use crate::error::{Error, Result};

/// Parameters of one density MLP: a `32 -> 1` layer.
pub const DENSITY_PARAMS: usize = POINT_FEATURES;

const HIDDEN: usize = 32;
const W1_LEN: usize = HIDDEN * POINT_FEATURES;
const W2_IN: usize = HIDDEN + DIR_FEATURES;
const W2_LEN: usize = HIDDEN * W2_IN;
const W3_LEN: usize = 3 * HIDDEN;

/// Parameters of one color MLP: `32x32 + 47x32 + 32x3 = 2624`.
pub const COLOR_PARAMS: usize = W1_LEN + W2_LEN + W3_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Density,
    Color,
}

impl Head {
    pub fn cell_params(self) -> usize {
        match self {
            Head::Density => DENSITY_PARAMS,
            Head::Color => COLOR_PARAMS,
        }
    }
}

/// Cell `(i, j)` of a `resolution`-square map containing `p`; `i` bins the
/// first projected coordinate. Bins are half-open with the top edge clamped.
#[inline]
pub fn bin_lookup<R: Real>(plane: Plane, resolution: usize, p: [R; 3]) -> (usize, usize) {
    let [u, v] = plane.project(p);
    let bin = |x: R| -> usize {
        let x = x.max(R::zero()).min(R::one()) * R::lit(resolution as f64);
        x.floor().to_usize().unwrap_or(0).min(resolution - 1)
    };
    (bin(u), bin(v))
}

/// One plane's grid of MLP parameter vectors, stored cell-major as
/// `[resolution, resolution, cell_params]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpMap<R> {
    plane: Plane,
    head: Head,
    resolution: usize,
    params: Vec<R>,
}

impl<R: Real> MlpMap<R> {
    pub fn zeros(plane: Plane, head: Head, resolution: usize) -> Self {
        let len = resolution * resolution * head.cell_params();
        MlpMap { plane, head, resolution, params: vec![R::zero(); len] }
    }

    /// Wraps an `[R, R, P]` tensor.
    pub fn from_tensor(plane: Plane, head: Head, t: Tensor<R>) -> Result<Self> {
        match *t.shape() {
            [h, w, p] if h == w && h > 0 && p == head.cell_params() => {
                Ok(MlpMap { plane, head, resolution: h, params: t.into_data() })
            }
            ref s => Err(Error::shape(
                "mlp map",
                format!("{head:?} map must be [R, R, {}], got {s:?}", head.cell_params()),
            )),
        }
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn cell_params(&self) -> usize {
        self.head.cell_params()
    }

    pub fn params(&self) -> &[R] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [R] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn bin_lookup(&self, p: [R; 3]) -> (usize, usize) {
        bin_lookup(self.plane, self.resolution, p)
    }

    pub fn cell(&self, i: usize, j: usize) -> &[R] {
        let p = self.cell_params();
        let off = (i * self.resolution + j) * p;
        &self.params[off..off + p]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [R] {
        let p = self.cell_params();
        let off = (i * self.resolution + j) * p;
        &mut self.params[off..off + p]
    }
}

/// One frame's radiance field: density and color maps (one per plane, same
/// plane order in both heads) plus the tri-plane features.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpMapSet<R> {
    pub frame: usize,
    density: Vec<MlpMap<R>>,
    color: Vec<MlpMap<R>>,
    triplanes: crate::encodings::TriPlaneFeatures<R>,
}

impl<R: Real> MlpMapSet<R> {
    pub fn new(
        frame: usize,
        density: Vec<MlpMap<R>>,
        color: Vec<MlpMap<R>>,
        triplanes: crate::encodings::TriPlaneFeatures<R>,
    ) -> Result<Self> {
        let planes: Vec<Plane> = density.iter().map(|m| m.plane).collect();
        let color_planes: Vec<Plane> = color.iter().map(|m| m.plane).collect();
        if planes.is_empty() || planes != color_planes {
            return Err(Error::Config(format!(
                "density planes {planes:?} and color planes {color_planes:?} must match and be non-empty"
            )));
        }
        for (i, p) in planes.iter().enumerate() {
            if planes[..i].contains(p) {
                return Err(Error::Config(format!("duplicate map for plane {p:?}")));
            }
        }
        let uniform = |maps: &[MlpMap<R>], head| {
            maps.iter().all(|m| m.head == head && m.resolution == maps[0].resolution)
        };
        if !uniform(&density, Head::Density) || !uniform(&color, Head::Color) {
            return Err(Error::Config("maps of one head must share head tag and resolution".into()));
        }
        Ok(MlpMapSet { frame, density, color, triplanes })
    }

    /// Zero maps on the three orthogonal planes.
    pub fn zeros(frame: usize, density_res: usize, color_res: usize, triplane_res: usize) -> Self {
        let density = Plane::ALL.iter().map(|&p| MlpMap::zeros(p, Head::Density, density_res)).collect();
        let color = Plane::ALL.iter().map(|&p| MlpMap::zeros(p, Head::Color, color_res)).collect();
        let triplanes = crate::encodings::TriPlaneFeatures::constant(triplane_res, R::zero());
        MlpMapSet { frame, density, color, triplanes }
    }

    pub fn planes(&self) -> Vec<Plane> {
        self.density.iter().map(|m| m.plane).collect()
    }

    pub fn density_maps(&self) -> &[MlpMap<R>] {
        &self.density
    }

    pub fn color_maps(&self) -> &[MlpMap<R>] {
        &self.color
    }

    pub fn maps_mut(&mut self, head: Head) -> &mut [MlpMap<R>] {
        match head {
            Head::Density => &mut self.density,
            Head::Color => &mut self.color,
        }
    }

    pub fn triplanes(&self) -> &crate::encodings::TriPlaneFeatures<R> {
        &self.triplanes
    }

    pub fn triplanes_mut(&mut self) -> &mut crate::encodings::TriPlaneFeatures<R> {
        &mut self.triplanes
    }

    /// Stored reals per head, recomputed from the maps.
    pub fn parameter_audit(&self) -> (usize, usize) {
        (
            self.density.iter().map(MlpMap::parameter_count).sum(),
            self.color.iter().map(MlpMap::parameter_count).sum(),
        )
    }

    /// Raw density pre-activation `s` and density `softplus(s)` at one point.
    pub fn eval_density(&self, gamma_p: &[R], p: [R; 3]) -> (R, R) {
        let mut s = R::zero();
        for map in &self.density {
            let (i, j) = map.bin_lookup(p);
            let w = map.cell(i, j);
            s += w.iter().zip(gamma_p).map(|(&a, &b)| a * b).sum::<R>();
        }
        (softplus(s), s)
    }

    /// Summed color logits at one point.
    pub fn eval_color_logits(&self, gamma_p: &[R], gamma_d: &[R], p: [R; 3]) -> [R; 3] {
        let mut logits = [R::zero(); 3];
        for map in &self.color {
            let (i, j) = map.bin_lookup(p);
            let out = color_mlp_single(map.cell(i, j), gamma_p, gamma_d);
            for k in 0..3 {
                logits[k] += out[k];
            }
        }
        logits
    }

    pub fn eval_color(&self, gamma_p: &[R], gamma_d: &[R], p: [R; 3]) -> [R; 3] {
        self.eval_color_logits(gamma_p, gamma_d, p).map(sigmoid)
    }

    /// Grouped evaluation of one head for a batch; see [`HeadOutput`].
    pub fn batched_eval(&self, batch: &PointBatch<R>, features: &BatchFeatures<'_, R>, head: Head) -> Result<HeadOutput<R>> {
        features.check(batch.len())?;
        match head {
            Head::Density => {
                // A 32 -> 1 layer has nothing to share across a cell, so
                // density is a direct gather and dot product per point.
                let mut raw = vec![R::zero(); batch.len()];
                for ((p, x), s) in batch.positions.iter().zip(features.point.chunks_exact(POINT_FEATURES)).zip(raw.iter_mut()) {
                    for map in &self.density {
                        let (i, j) = map.bin_lookup(*p);
                        *s += dot(map.cell(i, j), x);
                    }
                }
                let sigma = raw.iter().map(|&s| softplus(s)).collect();
                Ok(HeadOutput::Density { sigma, raw })
            }
            Head::Color => {
                let dirs = features
                    .direction
                    .ok_or_else(|| Error::InvalidArgument("color evaluation needs direction features".into()))?;
                let maps: Vec<&[R]> = self.color.iter().map(|m| m.params()).collect();
                let groups = PlaneGroups::build(&self.planes(), self.color[0].resolution, &batch.positions);
                let mut logits = vec![R::zero(); batch.len() * 3];
                color_forward(&maps, &groups, features.point, dirs, &mut logits, None);
                let rgb = logits.iter().map(|&l| sigmoid(l)).collect();
                Ok(HeadOutput::Color { rgb, logits })
            }
        }
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline]
fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = [R::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: R = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().copied().sum::<R>() + tail
}

/// A single color MLP on one point, written as plain loops.
fn color_mlp_single<R: Real>(w: &[R], x: &[R], d: &[R]) -> [R; 3] {
    let (w1, rest) = w.split_at(W1_LEN);
    let (w2, w3) = rest.split_at(W2_LEN);
    let mut h1 = [R::zero(); HIDDEN];
    for (o, h) in h1.iter_mut().enumerate() {
        *h = relu((0..POINT_FEATURES).map(|i| w1[o * POINT_FEATURES + i] * x[i]).sum());
    }
    let mut h2 = [R::zero(); HIDDEN];
    for (o, h) in h2.iter_mut().enumerate() {
        let row = &w2[o * W2_IN..(o + 1) * W2_IN];
        let a: R = (0..HIDDEN).map(|i| row[i] * h1[i]).sum();
        let b: R = (0..DIR_FEATURES).map(|i| row[HIDDEN + i] * d[i]).sum();
        *h = relu(a + b);
    }
    let mut out = [R::zero(); 3];
    for (o, v) in out.iter_mut().enumerate() {
        *v = (0..HIDDEN).map(|i| w3[o * HIDDEN + i] * h2[i]).sum();
    }
    out
}

/// Points to evaluate: unit-cube positions, unit view directions, and the
/// normalized time shared by the batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointBatch<R> {
    pub positions: Vec<[R; 3]>,
    pub directions: Vec<[R; 3]>,
    pub time: R,
}

impl<R: Real> PointBatch<R> {
    pub fn new(positions: Vec<[R; 3]>, directions: Vec<[R; 3]>, time: R) -> Result<Self> {
        if positions.len() != directions.len() {
            return Err(Error::shape(
                "point batch",
                format!("{} positions vs {} directions", positions.len(), directions.len()),
            ));
        }
        Ok(PointBatch { positions, directions, time })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Precomputed per-point inputs: `[N, 32]` point embeddings and optional
/// `[N, 15]` direction encodings (color head only).
#[derive(Clone, Copy, Debug)]
pub struct BatchFeatures<'a, R> {
    pub point: &'a [R],
    pub direction: Option<&'a [R]>,
}

impl<R> BatchFeatures<'_, R> {
    fn check(&self, n: usize) -> Result<()> {
        if self.point.len() != n * POINT_FEATURES {
            return Err(Error::shape("batched_eval", format!("{} point features for {n} points", self.point.len())));
        }
        if let Some(d) = self.direction {
            if d.len() != n * DIR_FEATURES {
                return Err(Error::shape("batched_eval", format!("{} direction features for {n} points", d.len())));
            }
        }
        Ok(())
    }
}

/// Per-point results of [`MlpMapSet::batched_eval`], in input order.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput<R> {
    Density { sigma: Vec<R>, raw: Vec<R> },
    /// `rgb` and `logits` are `[N, 3]` row-major.
    Color { rgb: Vec<R>, logits: Vec<R> },
}

// ---------------------------------------------------------------------------
// Grouping

/// Points of a batch that share one cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellGroup {
    pub cell: (usize, usize),
    pub indices: Vec<usize>,
}

/// Partitions batch indices by cell, ordered by cell; indices inside a group
/// keep their batch order.
pub fn group_points<R: Real>(plane: Plane, resolution: usize, positions: &[[R; 3]]) -> Vec<CellGroup> {
    let cells = resolution * resolution;
    let keys: Vec<usize> = positions
        .iter()
        .map(|&p| {
            let (i, j) = bin_lookup(plane, resolution, p);
            i * resolution + j
        })
        .collect();
    let mut counts = vec![0usize; cells];
    for &k in &keys {
        counts[k] += 1;
    }
    let mut groups: Vec<CellGroup> = Vec::new();
    let mut slot = vec![usize::MAX; cells];
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            slot[k] = groups.len();
            groups.push(CellGroup { cell: (k / resolution, k % resolution), indices: Vec::with_capacity(c) });
        }
    }
    for (idx, &k) in keys.iter().enumerate() {
        groups[slot[k]].indices.push(idx);
    }
    groups
}

/// Cell groups of a batch for every plane of a head.
pub(crate) struct PlaneGroups {
    resolution: usize,
    per_plane: Vec<Vec<CellGroup>>,
}

impl PlaneGroups {
    pub(crate) fn build<R: Real>(planes: &[Plane], resolution: usize, positions: &[[R; 3]]) -> Self {
        PlaneGroups {
            resolution,
            per_plane: planes.iter().map(|&p| group_points(p, resolution, positions)).collect(),
        }
    }

    fn cell_offset(&self, cell: (usize, usize), params: usize) -> usize {
        (cell.0 * self.resolution + cell.1) * params
    }
}

fn gather_rows<R: Real>(src: &[R], width: usize, indices: &[usize], dst: &mut Vec<R>) {
    dst.clear();
    for &i in indices {
        dst.extend_from_slice(&src[i * width..(i + 1) * width]);
    }
}

fn density_forward<R: Real>(maps: &[&[R]], groups: &PlaneGroups, feats: &[R], raw: &mut [R]) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (map, plane_groups) in maps.iter().zip(&groups.per_plane) {
        for g in plane_groups {
            let off = groups.cell_offset(g.cell, DENSITY_PARAMS);
            let w = &map[off..off + DENSITY_PARAMS];
            let n = g.indices.len();
            gather_rows(feats, POINT_FEATURES, &g.indices, &mut x);
            y.clear();
            y.resize(n, R::zero());
            gemm(
                R::one(),
                &x,
                Layout::row_major(n, POINT_FEATURES),
                w,
                Layout::row_major(POINT_FEATURES, 1),
                R::zero(),
                &mut y,
                Layout::row_major(n, 1),
            );
            for (&idx, &v) in g.indices.iter().zip(&y) {
                raw[idx] += v;
            }
        }
    }
}

/// Post-ReLU hidden activations saved for backward, `[plane][N * 32]`.
struct ColorSaved<R> {
    h1: Vec<Vec<R>>,
    h2: Vec<Vec<R>>,
}

fn color_forward<R: Real>(
    maps: &[&[R]],
    groups: &PlaneGroups,
    feats: &[R],
    dirs: &[R],
    logits: &mut [R],
    saved: Option<&mut ColorSaved<R>>,
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { color_forward_avx2(maps, groups, feats, dirs, logits, saved) };
    }
    color_forward_impl(maps, groups, feats, dirs, logits, saved)
}

/// The same code built for 256-bit vectors. Multiply and add stay separate
/// instructions, so results are identical to the baseline build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn color_forward_avx2<R: Real>(
    maps: &[&[R]],
    groups: &PlaneGroups,
    feats: &[R],
    dirs: &[R],
    logits: &mut [R],
    saved: Option<&mut ColorSaved<R>>,
) {
    color_forward_impl(maps, groups, feats, dirs, logits, saved)
}

#[inline(always)]
fn color_forward_impl<R: Real>(
    maps: &[&[R]],
    groups: &PlaneGroups,
    feats: &[R],
    dirs: &[R],
    logits: &mut [R],
    mut saved: Option<&mut ColorSaved<R>>,
) {
    let n_total = logits.len() / 3;
    if let Some(s) = saved.as_deref_mut() {
        s.h1 = vec![vec![R::zero(); n_total * HIDDEN]; maps.len()];
        s.h2 = vec![vec![R::zero(); n_total * HIDDEN]; maps.len()];
    }
    for (plane, (map, plane_groups)) in maps.iter().zip(&groups.per_plane).enumerate() {
        for g in plane_groups {
            let off = groups.cell_offset(g.cell, COLOR_PARAMS);
            let w = &map[off..off + COLOR_PARAMS];
            let (w1, rest) = w.split_at(W1_LEN);
            let (w2, w3) = rest.split_at(W2_LEN);
            for block in g.indices.chunks(LANES) {
                // inputs transposed so the points of a block sit in SIMD lanes
                let mut x = [[R::zero(); LANES]; POINT_FEATURES];
                let mut in2 = [[R::zero(); LANES]; W2_IN];
                for (l, &idx) in block.iter().enumerate() {
                    for (i, row) in x.iter_mut().enumerate() {
                        row[l] = feats[idx * POINT_FEATURES + i];
                    }
                    for i in 0..DIR_FEATURES {
                        in2[HIDDEN + i][l] = dirs[idx * DIR_FEATURES + i];
                    }
                }
                dense::<R, POINT_FEATURES, HIDDEN>(w1, &x, (&mut in2[..HIDDEN]).try_into().expect("hidden rows"), true);
                let mut h2 = [[R::zero(); LANES]; HIDDEN];
                dense::<R, W2_IN, HIDDEN>(w2, &in2, &mut h2, true);
                let mut out = [[R::zero(); LANES]; 3];
                dense::<R, HIDDEN, 3>(w3, &h2, &mut out, false);
                for (l, &idx) in block.iter().enumerate() {
                    for k in 0..3 {
                        logits[idx * 3 + k] += out[k][l];
                    }
                }
                if let Some(s) = saved.as_deref_mut() {
                    for (l, &idx) in block.iter().enumerate() {
                        for o in 0..HIDDEN {
                            s.h1[plane][idx * HIDDEN + o] = in2[o][l];
                            s.h2[plane][idx * HIDDEN + o] = h2[o][l];
                        }
                    }
                }
            }
        }
    }
}

/// Points per block of the grouped color kernel.
const LANES: usize = 16;

/// `out[o] = w[o, :] . inp` for a block of points held lane-wise; `w` is
/// row-major `[O, K]`. Even and odd inputs accumulate separately to keep
/// two independent add chains in flight.
#[inline(always)]
fn dense<R: Real, const K: usize, const O: usize>(w: &[R], inp: &[[R; LANES]; K], out: &mut [[R; LANES]; O], rectify: bool) {
    for (o, row) in out.iter_mut().enumerate() {
        let wr: &[R; K] = w[o * K..(o + 1) * K].try_into().expect("layer weights");
        let mut even = [R::zero(); LANES];
        let mut odd = [R::zero(); LANES];
        for i in (0..K - 1).step_by(2) {
            let (w0, w1) = (wr[i], wr[i + 1]);
            for l in 0..LANES {
                even[l] += w0 * inp[i][l];
                odd[l] += w1 * inp[i + 1][l];
            }
        }
        if K % 2 == 1 {
            for l in 0..LANES {
                even[l] += wr[K - 1] * inp[K - 1][l];
            }
        }
        for l in 0..LANES {
            let v = even[l] + odd[l];
            row[l] = if rectify { relu(v) } else { v };
        }
    }
}

// ---------------------------------------------------------------------------
// Graph operations

fn check_map_inputs<R: Real>(op: &'static str, maps: &[&Tensor<R>], params: usize, resolution: usize) -> Result<()> {
    for m in maps {
        if m.shape() != [resolution, resolution, params] {
            return Err(Error::shape(op, format!("map {:?}, expected [{resolution}, {resolution}, {params}]", m.shape())));
        }
    }
    Ok(())
}

/// Inputs: `[N, 32]` features followed by one `[R, R, 32]` map per plane.
/// Output: `[N]` summed pre-activation densities.
struct DensityOp {
    groups: PlaneGroups,
    n: usize,
}

impl<R: Real> Op<R> for DensityOp {
    fn name(&self) -> &'static str {
        "mlp_density"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let feats = inputs[0];
        if feats.shape() != [self.n, POINT_FEATURES] {
            return Err(Error::shape("mlp_density", format!("features {:?}", feats.shape())));
        }
        check_map_inputs("mlp_density", &inputs[1..], DENSITY_PARAMS, self.groups.resolution)?;
        let maps: Vec<&[R]> = inputs[1..].iter().map(|t| t.data()).collect();
        let mut raw = vec![R::zero(); self.n];
        density_forward(&maps, &self.groups, feats.data(), &mut raw);
        Tensor::new([self.n], raw)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Result<Vec<Option<Vec<R>>>> {
        let feats = ctx.inputs[0].data();
        let ds = ctx.grad;
        let mut dfeat = ctx.needs[0].then(|| vec![R::zero(); feats.len()]);
        let mut dmaps = Vec::with_capacity(ctx.inputs.len() - 1);
        for (plane, plane_groups) in self.groups.per_plane.iter().enumerate() {
            let map = ctx.inputs[1 + plane].data();
            let need_map = ctx.needs[1 + plane];
            let mut dmap = need_map.then(|| vec![R::zero(); map.len()]);
            for g in plane_groups {
                let off = self.groups.cell_offset(g.cell, DENSITY_PARAMS);
                let w = &map[off..off + DENSITY_PARAMS];
                for &idx in &g.indices {
                    let gs = ds[idx];
                    let x = &feats[idx * POINT_FEATURES..(idx + 1) * POINT_FEATURES];
                    if let Some(dm) = dmap.as_mut() {
                        for k in 0..DENSITY_PARAMS {
                            dm[off + k] += gs * x[k];
                        }
                    }
                    if let Some(df) = dfeat.as_mut() {
                        for k in 0..DENSITY_PARAMS {
                            df[idx * POINT_FEATURES + k] += gs * w[k];
                        }
                    }
                }
            }
            dmaps.push(dmap);
        }
        let mut grads = vec![dfeat];
        grads.extend(dmaps);
        Ok(grads)
    }
}

/// Inputs: `[N, 32]` features followed by one `[R, R, 2624]` map per plane.
/// Output: `[N, 3]` summed color logits. Directions are constants.
struct ColorOp<R> {
    groups: PlaneGroups,
    dirs: Vec<R>,
    n: usize,
    saved: ColorSaved<R>,
}

impl<R: Real> Op<R> for ColorOp<R> {
    fn name(&self) -> &'static str {
        "mlp_color"
    }

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>> {
        let feats = inputs[0];
        if feats.shape() != [self.n, POINT_FEATURES] || self.dirs.len() != self.n * DIR_FEATURES {
            return Err(Error::shape("mlp_color", format!("features {:?}", feats.shape())));
        }
        check_map_inputs("mlp_color", &inputs[1..], COLOR_PARAMS, self.groups.resolution)?;
        let maps: Vec<&[R]> = inputs[1..].iter().map(|t| t.data()).collect();
        let mut logits = vec![R::zero(); self.n * 3];
        color_forward(&maps, &self.groups, feats.data(), &self.dirs, &mut logits, Some(&mut self.saved));
        Tensor::new([self.n, 3], logits)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Result<Vec<Option<Vec<R>>>> {
        let feats = ctx.inputs[0].data();
        let mut dfeat = ctx.needs[0].then(|| vec![R::zero(); feats.len()]);
        let mut dmaps = Vec::with_capacity(ctx.inputs.len() - 1);
        let (mut x, mut in2, mut h2, mut dl, mut dh2, mut din2, mut dh1, mut dx) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (plane, plane_groups) in self.groups.per_plane.iter().enumerate() {
            let map = ctx.inputs[1 + plane].data();
            let mut dmap = ctx.needs[1 + plane].then(|| vec![R::zero(); map.len()]);
            let (sh1, sh2) = (&self.saved.h1[plane], &self.saved.h2[plane]);
            for g in plane_groups {
                let off = self.groups.cell_offset(g.cell, COLOR_PARAMS);
                let w = &map[off..off + COLOR_PARAMS];
                let (w1, rest) = w.split_at(W1_LEN);
                let (w2, w3) = rest.split_at(W2_LEN);
                let n = g.indices.len();

                gather_rows(ctx.grad, 3, &g.indices, &mut dl);
                gather_rows(sh2, HIDDEN, &g.indices, &mut h2);
                in2.clear();
                for &idx in &g.indices {
                    in2.extend_from_slice(&sh1[idx * HIDDEN..(idx + 1) * HIDDEN]);
                    in2.extend_from_slice(&self.dirs[idx * DIR_FEATURES..(idx + 1) * DIR_FEATURES]);
                }

                // layer 3: logits = h2 W3^T
                dh2.clear();
                dh2.resize(n * HIDDEN, R::zero());
                gemm(R::one(), &dl, Layout::row_major(n, 3), w3, Layout::row_major(3, HIDDEN), R::zero(), &mut dh2, Layout::row_major(n, HIDDEN));
                for (d, &h) in dh2.iter_mut().zip(&h2) {
                    if h <= R::zero() {
                        *d = R::zero();
                    }
                }
                // layer 2: h2 = relu(in2 W2^T)
                din2.clear();
                din2.resize(n * W2_IN, R::zero());
                gemm(R::one(), &dh2, Layout::row_major(n, HIDDEN), w2, Layout::row_major(HIDDEN, W2_IN), R::zero(), &mut din2, Layout::row_major(n, W2_IN));
                dh1.clear();
                for r in 0..n {
                    for k in 0..HIDDEN {
                        let h = in2[r * W2_IN + k];
                        dh1.push(if h > R::zero() { din2[r * W2_IN + k] } else { R::zero() });
                    }
                }
                if let Some(dm) = dmap.as_mut() {
                    let dw = &mut dm[off..off + COLOR_PARAMS];
                    let (dw1, rest) = dw.split_at_mut(W1_LEN);
                    let (dw2, dw3) = rest.split_at_mut(W2_LEN);
                    gather_rows(feats, POINT_FEATURES, &g.indices, &mut x);
                    gemm(R::one(), &dl, Layout::row_major(n, 3).t(), &h2, Layout::row_major(n, HIDDEN), R::zero(), dw3, Layout::row_major(3, HIDDEN));
                    gemm(R::one(), &dh2, Layout::row_major(n, HIDDEN).t(), &in2, Layout::row_major(n, W2_IN), R::zero(), dw2, Layout::row_major(HIDDEN, W2_IN));
                    gemm(R::one(), &dh1, Layout::row_major(n, HIDDEN).t(), &x, Layout::row_major(n, POINT_FEATURES), R::zero(), dw1, Layout::row_major(HIDDEN, POINT_FEATURES));
                }
                if let Some(df) = dfeat.as_mut() {
                    dx.clear();
                    dx.resize(n * POINT_FEATURES, R::zero());
                    gemm(R::one(), &dh1, Layout::row_major(n, HIDDEN), w1, Layout::row_major(HIDDEN, POINT_FEATURES), R::zero(), &mut dx, Layout::row_major(n, POINT_FEATURES));
                    for (r, &idx) in g.indices.iter().enumerate() {
                        for k in 0..POINT_FEATURES {
                            df[idx * POINT_FEATURES + k] += dx[r * POINT_FEATURES + k];
                        }
                    }
                }
            }
            dmaps.push(dmap);
        }
        let mut grads = vec![dfeat];
        grads.extend(dmaps);
        Ok(grads)
    }
}

impl<R: Real> Graph<R> {
    /// Records summed per-plane density pre-activations `[N]`. `maps` holds
    /// one `[res, res, 32]` map per entry of `planes`.
    pub fn mlp_density(&mut self, features: Var, maps: &[Var], planes: &[Plane], positions: &[[R; 3]]) -> Result<Var> {
        let resolution = self.map_resolution(maps, planes)?;
        let op = DensityOp { groups: PlaneGroups::build(planes, resolution, positions), n: positions.len() };
        let mut inputs = vec![features];
        inputs.extend_from_slice(maps);
        self.apply(op, &inputs)
    }

    /// Records summed per-plane color logits `[N, 3]`. `directions` is the
    /// `[N, 15]` direction encoding.
    pub fn mlp_color(
        &mut self,
        features: Var,
        maps: &[Var],
        planes: &[Plane],
        positions: &[[R; 3]],
        directions: Vec<R>,
    ) -> Result<Var> {
        let resolution = self.map_resolution(maps, planes)?;
        let op = ColorOp {
            groups: PlaneGroups::build(planes, resolution, positions),
            dirs: directions,
            n: positions.len(),
            saved: ColorSaved { h1: Vec::new(), h2: Vec::new() },
        };
        let mut inputs = vec![features];
        inputs.extend_from_slice(maps);
        self.apply(op, &inputs)
    }

    fn map_resolution(&self, maps: &[Var], planes: &[Plane]) -> Result<usize> {
        if maps.is_empty() || maps.len() != planes.len() {
            return Err(Error::InvalidArgument(format!("{} maps for {} planes", maps.len(), planes.len())));
        }
        Ok(self.value(maps[0]).shape()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_layout() {
        assert_eq!(COLOR_PARAMS, 32 * 32 + (32 + 15) * 32 + 32 * 3);
        assert_eq!(COLOR_PARAMS, 2624);
        assert_eq!(DENSITY_PARAMS, 32);
    }

    #[test]
    fn binning_examples() {
        assert_eq!(bin_lookup(Plane::XY, 16, [0.0f64, 0.0, 0.0]), (0, 0));
        assert_eq!(bin_lookup(Plane::XY, 16, [1.0f64, 1.0, 1.0]), (15, 15));
        assert_eq!(bin_lookup(Plane::XZ, 16, [0.5f64, 0.0, 0.5]), (8, 8));
        assert_eq!(bin_lookup(Plane::YZ, 4, [0.0f64, 0.3, 0.9]), (1, 3));
        assert_eq!(bin_lookup(Plane::XY, 4, [-2.0f64, 7.0, 0.0]), (0, 3));
    }

    #[test]
    fn group_edge_cases() {
        assert!(group_points::<f64>(Plane::XY, 4, &[]).is_empty());
        let pts = vec![[0.1f64, 0.1, 0.9]; 5];
        let g = group_points(Plane::XY, 4, &pts);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].indices, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn mismatched_heads_rejected() {
        let d = vec![MlpMap::<f64>::zeros(Plane::XY, Head::Density, 2)];
        let c = vec![MlpMap::<f64>::zeros(Plane::XZ, Head::Color, 1)];
        let tri = crate::encodings::TriPlaneFeatures::constant(2, 0.0);
        assert!(MlpMapSet::new(0, d, c, tri).is_err());
    }
}
