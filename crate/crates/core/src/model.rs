//! The trainable parameter bundle and per-frame field evaluation.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{Precision, Real};
use crate::encodings::{dir_encode, embed_batch, FeatureProjector, HashConfig, HashTableSet, DIR_FEATURES, POINT_FEATURES};
use crate::error::{Error, Result};
use crate::hypernet::{DecodeCache, DecoderConfig, DecoderWeights, LatentTable};
use crate::mlpmaps::{BatchFeatures, Head, HeadOutput, MlpMapSet, PointBatch};
use crate::renderer::{Field, SceneBounds, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub hash: HashConfig,
    pub frames: usize,
    pub bounds: SceneBounds,
    pub precision: Precision,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size architecture.
    pub fn full(frames: usize, bounds: SceneBounds) -> Self {
        ModelConfig {
            decoder: DecoderConfig::default(),
            hash: HashConfig::default(),
            frames,
            bounds,
            precision: Precision::F32,
            seed: 0,
        }
    }

    /// Small configuration for CPU experiments: decoder shrunk by 4 and a
    /// lighter hash grid.
    pub fn toy(frames: usize, bounds: SceneBounds) -> Self {
        ModelConfig {
            decoder: DecoderConfig::shrunk(4).expect("valid factor"),
            hash: HashConfig { levels: 8, log2_table_size: 14, features: 2, min_resolution: 8, max_resolution: 128 },
            ..Self::full(frames, bounds)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.hash.validate()?;
        if self.frames == 0 {
            return Err(Error::Config("model needs at least one frame".into()));
        }
        SceneBounds::new(self.bounds.min, self.bounds.max)?;
        Ok(())
    }

    /// Normalized time of a frame; a single-frame model maps to 0.
    pub fn time(&self, frame: usize) -> f64 {
        if self.frames <= 1 {
            0.0
        } else {
            frame as f64 / (self.frames - 1) as f64
        }
    }
}

/// Latents, decoder, hash tables and projector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<R> {
    pub config: ModelConfig,
    pub decoder: DecoderWeights<R>,
    pub latents: LatentTable<R>,
    pub hash: HashTableSet<R>,
    pub projector: FeatureProjector<R>,
}

impl<R: Real> Model<R> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.precision != R::PRECISION {
            return Err(Error::Config(format!("config asks for {:?} but the model is built in {:?}", config.precision, R::PRECISION)));
        }
        let decoder = DecoderWeights::init(config.decoder.clone(), config.seed)?;
        let latents = LatentTable::init(config.frames, config.decoder.latent_dim, config.seed.wrapping_add(1));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
        let hash = HashTableSet::init(config.hash.clone(), &mut rng)?;
        let projector = FeatureProjector::init(config.hash.encoded_len(), &mut rng);
        Ok(Model { config, decoder, latents, hash, projector })
    }

    /// Assembles a model from parts, checking them against the config.
    pub fn from_parts(
        config: ModelConfig,
        decoder: DecoderWeights<R>,
        latents: LatentTable<R>,
        hash: HashTableSet<R>,
        projector: FeatureProjector<R>,
    ) -> Result<Self> {
        config.validate()?;
        if decoder.config() != &config.decoder {
            return Err(Error::Config("decoder weights do not match the decoder config".into()));
        }
        if latents.frames() != config.frames || latents.dim() != config.decoder.latent_dim {
            return Err(Error::Config(format!(
                "latent table is {}x{}, config wants {}x{}",
                latents.frames(),
                latents.dim(),
                config.frames,
                config.decoder.latent_dim
            )));
        }
        if hash.config() != &config.hash {
            return Err(Error::Config("hash tables do not match the hash config".into()));
        }
        if projector.input_len() != config.hash.encoded_len() {
            return Err(Error::Config("projector input width does not match the hash encoding".into()));
        }
        Ok(Model { config, decoder, latents, hash, projector })
    }

    pub fn frames(&self) -> usize {
        self.config.frames
    }

    pub fn bounds(&self) -> &SceneBounds {
        &self.config.bounds
    }

    pub fn decode(&self, frame: usize) -> Result<MlpMapSet<R>> {
        self.decoder.decode(self.latents.latent(frame)?, frame)
    }

    /// Field view of one decoded frame.
    pub fn field<'a>(&'a self, maps: &'a MlpMapSet<R>) -> FrameField<'a, R> {
        FrameField { model: self, maps, time: R::lit(self.config.time(maps.frame)) }
    }

    /// Makes every frame decode to zero density: tri-planes become a
    /// constant, the hash tables are zeroed, and the density maps hold large
    /// negative weights so `softplus` underflows to exactly zero.
    pub fn clear_density(&mut self) {
        for (name, value) in [("triplane.weight", 0.0), ("triplane.bias", 1.0), ("density.weight", 0.0), ("density.bias", -10.0)] {
            if let Some(t) = self.decoder.tensor_mut(name) {
                t.data_mut().fill(R::lit(value));
            }
        }
        self.hash.tensor_mut().data_mut().fill(R::zero());
    }

    /// Parameter tensors by group, for auditing and serialization.
    pub fn parameter_count(&self) -> usize {
        self.config.decoder.parameter_count()
            + self.latents.tensor().numel()
            + self.hash.tensor().numel()
            + self.projector.tensor().numel()
    }
}

/// Model plus decode cache, shared by renders of many frames.
pub struct Renderable<R: Real> {
    pub model: Arc<Model<R>>,
    pub cache: DecodeCache<R>,
}

impl<R: Real> Renderable<R> {
    pub fn new(model: Model<R>, cache_capacity: usize) -> Self {
        Renderable { model: Arc::new(model), cache: DecodeCache::new(cache_capacity) }
    }

    pub fn maps(&self, frame: usize) -> Result<Arc<MlpMapSet<R>>> {
        if frame >= self.model.frames() {
            return Err(Error::OutOfRange { what: "frame", index: frame, len: self.model.frames() });
        }
        self.cache.get_or_decode(frame, || self.model.decode(frame))
    }
}

/// One frame's radiance field: decoded maps plus the shared encoders.
pub struct FrameField<'a, R> {
    model: &'a Model<R>,
    maps: &'a MlpMapSet<R>,
    time: R,
}

/// Unit-cube positions and point embeddings from the density pass.
pub struct FieldCache<R> {
    unit: Vec<[R; 3]>,
    features: Vec<R>,
}

impl<R: Real> FrameField<'_, R> {
    pub fn maps(&self) -> &MlpMapSet<R> {
        self.maps
    }

    fn unit(&self, points: &[Vec3]) -> Vec<[R; 3]> {
        let b = self.model.bounds();
        points.iter().map(|&p| b.to_unit(p).map(R::lit)).collect()
    }

    /// Densities as `f64`, for occupancy builds.
    pub fn density_f64(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        Ok(self.density(points)?.0.into_iter().map(|s| s.as_f64()).collect())
    }
}

impl<R: Real> Field for FrameField<'_, R> {
    type Real = R;
    type Cache = FieldCache<R>;

    fn density(&self, points: &[Vec3]) -> Result<(Vec<R>, FieldCache<R>)> {
        let unit = self.unit(points);
        let features = embed_batch(&self.model.hash, &self.model.projector, self.maps.triplanes(), &unit, self.time);
        let batch = PointBatch { positions: unit, directions: Vec::new(), time: self.time };
        let feats = BatchFeatures { point: &features, direction: None };
        let sigma = match self.maps.batched_eval(&batch, &feats, Head::Density)? {
            HeadOutput::Density { sigma, .. } => sigma,
            HeadOutput::Color { .. } => unreachable!("density head returns densities"),
        };
        Ok((sigma, FieldCache { unit: batch.positions, features }))
    }

    fn color(&self, _points: &[Vec3], cache: &FieldCache<R>, select: &[usize], dirs: &[Vec3]) -> Result<Vec<[R; 3]>> {
        let positions: Vec<[R; 3]> = select.iter().map(|&i| cache.unit[i]).collect();
        let mut point = Vec::with_capacity(select.len() * POINT_FEATURES);
        for &i in select {
            point.extend_from_slice(&cache.features[i * POINT_FEATURES..(i + 1) * POINT_FEATURES]);
        }
        let mut direction = Vec::with_capacity(select.len() * DIR_FEATURES);
        for d in dirs {
            direction.extend_from_slice(&dir_encode(d.map(R::lit)));
        }
        let batch = PointBatch { directions: dirs.iter().map(|d| d.map(R::lit)).collect(), positions, time: self.time };
        let feats = BatchFeatures { point: &point, direction: Some(&direction) };
        match self.maps.batched_eval(&batch, &feats, Head::Color)? {
            HeadOutput::Color { rgb, .. } => Ok(rgb.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()),
            HeadOutput::Density { .. } => unreachable!("color head returns colors"),
        }
    }
}
