//! Per-frame latent codes and the convolutional decoder that turns a latent
//! into one frame's MLP maps and tri-plane features.
//!
//! Layout: a fully connected stem maps `z` to a `C x 4 x 4` map, a chain of
//! stride-2 transposed convolutions upsamples it to the backbone, and three
//! heads read the backbone: tri-plane features (one conv), density maps (one
//! stride-1 conv) and color maps (stride-2 convs down to the color
//! resolution, then one stride-1 conv). Each head emits its planes as channel
//! groups in the order XY, XZ, YZ.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{Graph, Real, Tensor, Var};
use crate::encodings::{Plane, TriPlaneFeatures, POINT_FEATURES};
use crate::error::{Error, Result};
use crate::mlpmaps::{Head, MlpMap, MlpMapSet, COLOR_PARAMS, DENSITY_PARAMS};

const STEM_SIZE: usize = 4;
const DECONV_K: usize = 4;
const HEAD_K: usize = 3;

/// Which planes carry MLP maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapPlanes {
    #[default]
    Orthogonal,
    /// A single map on the XY plane (ablation).
    SingleXy,
}

impl MapPlanes {
    pub fn planes(self) -> Vec<Plane> {
        match self {
            MapPlanes::Orthogonal => Plane::ALL.to_vec(),
            MapPlanes::SingleXy => vec![Plane::XY],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    /// Channels of the `4 x 4` stem map.
    pub stem_channels: usize,
    /// Output channels of each stride-2 transposed convolution.
    pub deconv_channels: Vec<usize>,
    /// Number of stride-2 convolutions in the color head.
    pub color_downsamples: usize,
    /// Channels of the color head's stride-2 convolutions.
    pub color_hidden: usize,
    pub planes: MapPlanes,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            latent_dim: 256,
            stem_channels: 256,
            deconv_channels: vec![256, 128, 128, 64, 64, 32],
            color_downsamples: 4,
            color_hidden: 32,
            planes: MapPlanes::Orthogonal,
        }
    }
}

impl DecoderConfig {
    /// The default architecture with resolutions and channel widths divided
    /// by `factor` (a power of two). Map parameter counts are unchanged.
    pub fn shrunk(factor: usize) -> Result<Self> {
        if !factor.is_power_of_two() || factor > 64 {
            return Err(Error::Config(format!("shrink factor {factor} must be a power of two <= 64")));
        }
        let full = DecoderConfig::default();
        let backbone = 256 / factor;
        let deconvs = (backbone / STEM_SIZE).trailing_zeros() as usize;
        let div = |c: usize| (c / factor).max(4);
        Ok(DecoderConfig {
            latent_dim: full.latent_dim,
            stem_channels: div(full.stem_channels),
            deconv_channels: full.deconv_channels[full.deconv_channels.len() - deconvs..].iter().map(|&c| div(c)).collect(),
            color_downsamples: full.color_downsamples.min(backbone.trailing_zeros() as usize),
            color_hidden: div(full.color_hidden),
            planes: full.planes,
        })
    }

    pub fn backbone_resolution(&self) -> usize {
        STEM_SIZE << self.deconv_channels.len()
    }

    pub fn backbone_channels(&self) -> usize {
        self.deconv_channels.last().copied().unwrap_or(self.stem_channels)
    }

    pub fn density_resolution(&self) -> usize {
        self.backbone_resolution()
    }

    pub fn color_resolution(&self) -> usize {
        self.backbone_resolution() >> self.color_downsamples
    }

    pub fn triplane_resolution(&self) -> usize {
        self.backbone_resolution()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.stem_channels == 0 || self.color_hidden == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if self.deconv_channels.contains(&0) {
            return Err(Error::Config("deconv channels must be positive".into()));
        }
        if self.color_resolution() == 0 {
            return Err(Error::Config(format!(
                "{} color downsamples exceed backbone resolution {}",
                self.color_downsamples,
                self.backbone_resolution()
            )));
        }
        Ok(())
    }

    /// Names and shapes of every decoder tensor, in storage order.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let stem_out = self.stem_channels * STEM_SIZE * STEM_SIZE;
        let n_planes = self.planes.planes().len();
        let mut shapes = vec![
            ("stem.weight".to_string(), vec![self.latent_dim, stem_out]),
            ("stem.bias".to_string(), vec![1, stem_out]),
        ];
        let mut c_in = self.stem_channels;
        for (i, &c) in self.deconv_channels.iter().enumerate() {
            shapes.push((format!("deconv{i}.weight"), vec![c_in, c, DECONV_K, DECONV_K]));
            shapes.push((format!("deconv{i}.bias"), vec![c, 1, 1]));
            c_in = c;
        }
        let backbone = c_in;
        let tri = 3 * POINT_FEATURES;
        shapes.push(("triplane.weight".into(), vec![tri, backbone, HEAD_K, HEAD_K]));
        shapes.push(("triplane.bias".into(), vec![tri, 1, 1]));
        let dens = n_planes * DENSITY_PARAMS;
        shapes.push(("density.weight".into(), vec![dens, backbone, HEAD_K, HEAD_K]));
        shapes.push(("density.bias".into(), vec![dens, 1, 1]));
        let mut c_in = backbone;
        for i in 0..self.color_downsamples {
            shapes.push((format!("color.down{i}.weight"), vec![self.color_hidden, c_in, HEAD_K, HEAD_K]));
            shapes.push((format!("color.down{i}.bias"), vec![self.color_hidden, 1, 1]));
            c_in = self.color_hidden;
        }
        let col = n_planes * COLOR_PARAMS;
        shapes.push(("color.out.weight".into(), vec![col, c_in, HEAD_K, HEAD_K]));
        shapes.push(("color.out.bias".into(), vec![col, 1, 1]));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Scale targets for the generated parameters at initialization.
const DENSITY_INIT_STD: f64 = 0.15;
const COLOR_INIT_STD: f64 = 0.2;
const TRIPLANE_INIT_STD: f64 = 0.5;

/// All decoder tensors, in [`DecoderConfig::layer_shapes`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights<R> {
    config: DecoderConfig,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> DecoderWeights<R> {
    /// Kaiming-uniform weights and biases over each layer's fan-in, after
    /// which each head is rescaled so its output at the zero latent has a
    /// fixed standard deviation.
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.layer_shapes();
        let mut tensors = Vec::with_capacity(shapes.len());
        for pair in shapes.chunks(2) {
            let (wname, wshape) = &pair[0];
            let fan_in = if wname.starts_with("stem") {
                wshape[0]
            } else if wname.starts_with("deconv") {
                // each output pixel of a stride-2 k=4 deconv sees 4 taps per input channel
                wshape[0] * DECONV_K * DECONV_K / 4
            } else {
                wshape[1] * wshape[2] * wshape[3]
            };
            let is_head = matches!(wname.as_str(), "triplane.weight" | "density.weight" | "color.out.weight");
            tensors.push(Tensor::uniform(wshape.clone(), (6.0 / fan_in as f64).sqrt(), &mut rng));
            let bshape = pair[1].1.clone();
            tensors.push(if is_head {
                Tensor::zeros(bshape)
            } else {
                Tensor::uniform(bshape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
            });
        }
        let mut weights = DecoderWeights { config, tensors };
        weights.calibrate_heads()?;
        Ok(weights)
    }

    pub fn from_tensors(config: DecoderConfig, tensors: Vec<Tensor<R>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Config(format!("decoder expects {} tensors, got {}", shapes.len(), tensors.len())));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("decoder", format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(DecoderWeights { config, tensors })
    }

    fn calibrate_heads(&mut self) -> Result<()> {
        let z = vec![R::zero(); self.config.latent_dim];
        let mut g = Graph::new();
        let vars = self.constants(&mut g);
        let zv = g.constant(Tensor::new([1, self.config.latent_dim], z)?);
        let heads = decode_heads(&mut g, &self.config, &vars, zv)?;
        let targets = [
            ("triplane.weight", heads.triplanes, TRIPLANE_INIT_STD),
            ("density.weight", heads.density, DENSITY_INIT_STD),
            ("color.out.weight", heads.color, COLOR_INIT_STD),
        ];
        for (name, var, target) in targets {
            let data = g.value(var).data();
            let n = data.len() as f64;
            let mean = data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var_ = data.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            let std = var_.sqrt();
            if std > 0.0 {
                let k = R::lit(target / std);
                let idx = self.index_of(name).expect("head layer");
                self.tensors[idx].data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.config.layer_shapes().iter().position(|(n, _)| n == name)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor<R>)> {
        self.config.layer_shapes().into_iter().map(|(n, _)| n).zip(&self.tensors)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<R>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    /// Records every tensor as an untracked constant.
    pub fn constants(&self, g: &mut Graph<R>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Records every tensor as a tracked leaf.
    pub fn leaves(&self, g: &mut Graph<R>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone().tracked())).collect()
    }

    /// Decodes one latent into the frame's maps.
    pub fn decode(&self, z: &[R], frame: usize) -> Result<MlpMapSet<R>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::shape("decode", format!("latent of {} values, expected {}", z.len(), self.config.latent_dim)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent contains non-finite values".into()));
        }
        let mut g = Graph::new();
        let vars = self.constants(&mut g);
        let zv = g.constant(Tensor::new([1, z.len()], z.to_vec())?);
        let out = decode_graph(&mut g, &self.config, &vars, zv)?;
        let planes = self.config.planes.planes();
        let take_maps = |g: &mut Graph<R>, vars: &[Var], head: Head| -> Result<Vec<MlpMap<R>>> {
            planes.iter().zip(vars).map(|(&p, &v)| MlpMap::from_tensor(p, head, g.take_value(v))).collect()
        };
        let density = take_maps(&mut g, &out.density, Head::Density)?;
        let color = take_maps(&mut g, &out.color, Head::Color)?;
        let triplanes = TriPlaneFeatures::new(g.take_value(out.triplanes))?;
        MlpMapSet::new(frame, density, color, triplanes)
    }
}

/// Raw head outputs, channel-major.
struct HeadVars {
    triplanes: Var,
    density: Var,
    color: Var,
}

fn layer(name: &str, r: Result<Var>) -> Result<Var> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite { op: format!("decoder layer {name} ({op})") },
        other => other,
    })
}

fn decode_heads<R: Real>(g: &mut Graph<R>, config: &DecoderConfig, w: &[Var], z: Var) -> Result<HeadVars> {
    let mut it = w.iter().copied();
    let mut next = || it.next().ok_or_else(|| Error::Config("decoder weight list too short".into()));

    let (sw, sb) = (next()?, next()?);
    let h = layer("stem", g.matmul(z, sw))?;
    let h = layer("stem", g.add(h, sb))?;
    let h = layer("stem", g.relu(h))?;
    let mut h = g.reshape(h, [config.stem_channels, STEM_SIZE, STEM_SIZE])?;
    for i in 0..config.deconv_channels.len() {
        let name = format!("deconv{i}");
        let (kw, kb) = (next()?, next()?);
        h = layer(&name, g.deconv2d(h, kw, 2, 1))?;
        h = layer(&name, g.add(h, kb))?;
        h = layer(&name, g.relu(h))?;
    }
    let backbone = h;

    let (tw, tb) = (next()?, next()?);
    let tri = layer("triplane", g.conv2d(backbone, tw, 1, 1))?;
    let tri = layer("triplane", g.add(tri, tb))?;

    let (dw, db) = (next()?, next()?);
    let dens = layer("density", g.conv2d(backbone, dw, 1, 1))?;
    let dens = layer("density", g.add(dens, db))?;

    let mut c = backbone;
    for i in 0..config.color_downsamples {
        let name = format!("color.down{i}");
        let (cw, cb) = (next()?, next()?);
        c = layer(&name, g.conv2d(c, cw, 2, 1))?;
        c = layer(&name, g.add(c, cb))?;
        c = layer(&name, g.relu(c))?;
    }
    let (ow, ob) = (next()?, next()?);
    let col = layer("color.out", g.conv2d(c, ow, 1, 1))?;
    let col = layer("color.out", g.add(col, ob))?;
    Ok(HeadVars { triplanes: tri, density: dens, color: col })
}

/// Decoder outputs recorded on a graph.
#[derive(Clone, Debug)]
pub struct DecodedVars {
    /// `[R, R, 32]` per plane.
    pub density: Vec<Var>,
    /// `[R, R, 2624]` per plane.
    pub color: Vec<Var>,
    /// `[96, R, R]`.
    pub triplanes: Var,
}

/// Records the decoder on `g`. `weights` are the decoder tensors in storage
/// order and `z` is a `[1, latent_dim]` value.
pub fn decode_graph<R: Real>(g: &mut Graph<R>, config: &DecoderConfig, weights: &[Var], z: Var) -> Result<DecodedVars> {
    let heads = decode_heads(g, config, weights, z)?;
    let n_planes = config.planes.planes().len();
    let mut split = |head: Var, params: usize| -> Result<Vec<Var>> {
        (0..n_planes)
            .map(|p| {
                let s = g.channel_slice(head, p * params, params)?;
                g.chw_to_hwc(s)
            })
            .collect()
    };
    let density = split(heads.density, DENSITY_PARAMS)?;
    let color = split(heads.color, COLOR_PARAMS)?;
    Ok(DecodedVars { density, color, triplanes: heads.triplanes })
}

/// One learnable latent per frame, stored as `[frames, latent_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable<R> {
    table: Tensor<R>,
}

impl<R: Real> LatentTable<R> {
    /// Entries drawn from `N(0, 0.01^2)`.
    pub fn init(frames: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentTable { table: Tensor::normal([frames, dim], 0.01, &mut rng) }
    }

    pub fn from_tensor(table: Tensor<R>) -> Result<Self> {
        match table.shape() {
            [_, d] if *d > 0 => Ok(LatentTable { table }),
            s => Err(Error::shape("latent table", format!("expected [frames, dim], got {s:?}"))),
        }
    }

    pub fn frames(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn latent(&self, frame: usize) -> Result<&[R]> {
        if frame >= self.frames() {
            return Err(Error::OutOfRange { what: "frame", index: frame, len: self.frames() });
        }
        let d = self.dim();
        Ok(&self.table.data()[frame * d..(frame + 1) * d])
    }

    pub fn tensor(&self) -> &Tensor<R> {
        &self.table
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<R> {
        &mut self.table
    }
}

/// Least-recently-used memo of decoded frames.
pub struct DecodeCache<R> {
    capacity: usize,
    inner: Mutex<CacheInner<R>>,
}

struct CacheInner<R> {
    entries: VecDeque<(usize, Arc<MlpMapSet<R>>)>,
    decodes: usize,
}

impl<R: Real> DecodeCache<R> {
    pub const DEFAULT_CAPACITY: usize = 4;

    pub fn new(capacity: usize) -> Self {
        DecodeCache { capacity: capacity.max(1), inner: Mutex::new(CacheInner { entries: VecDeque::new(), decodes: 0 }) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of decodes run so far.
    pub fn decodes(&self) -> usize {
        self.inner.lock().unwrap().decodes
    }

    /// Returns the cached maps for `frame`, decoding and inserting them on a
    /// miss. The lock is held while decoding, so a frame is decoded once.
    pub fn get_or_decode(
        &self,
        frame: usize,
        decode: impl FnOnce() -> Result<MlpMapSet<R>>,
    ) -> Result<Arc<MlpMapSet<R>>> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(pos) = inner.entries.iter().position(|(f, _)| *f == frame) {
            let entry = inner.entries.remove(pos).unwrap();
            let maps = entry.1.clone();
            inner.entries.push_back(entry);
            return Ok(maps);
        }
        let maps = Arc::new(decode()?);
        inner.decodes += 1;
        if inner.entries.len() == self.capacity {
            inner.entries.pop_front();
        }
        inner.entries.push_back((frame, maps.clone()));
        Ok(maps)
    }

    pub fn clear(&self) {
        self.inner.lock().unwrap().entries.clear();
    }
}

impl<R: Real> Default for DecodeCache<R> {
    fn default() -> Self {
        Self::new(Self::DEFAULT_CAPACITY)
    }
}
