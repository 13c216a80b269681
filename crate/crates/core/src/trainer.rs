//! Losses, the adaptive-moment optimizer and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{Graph, Real, Tensor, Var};
use crate::encodings::{dir_encode, DIR_FEATURES};
use crate::error::{Error, Result};
use crate::hypernet::decode_graph;
use crate::model::Model;
use crate::renderer::{gen_rays, sample_train, Ray, RaySamples};
use crate::scenekit::{save_checkpoint, Dataset};

pub const DEFAULT_LAMBDA_KL: f64 = 1e-6;
pub const DEFAULT_LAMBDA_MASK: f64 = 0.1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub color: f64,
    pub kl: f64,
    pub mask: f64,
    pub total: f64,
    pub rays: usize,
    pub epoch: usize,
    pub lr_net: f64,
    pub lr_hash: f64,
}

/// `L_c = sum |C~ - C|^2`, `L_m = sum (M~ - M)^2` and `L_KL = 1/2 sum |z|^2`
/// over the latents of the batch (one entry per image). `rendered` and
/// `target` are `[rays, 3]`; pass no masks to disable the mask term.
pub fn compute_loss(
    rendered: &[f64],
    target: &[f64],
    masks: Option<(&[f64], &[f64])>,
    latents: &[&[f64]],
    lambda_kl: f64,
    lambda_mask: f64,
) -> Result<LossReport> {
    if rendered.len() != target.len() || !rendered.len().is_multiple_of(3) {
        return Err(Error::shape("compute_loss", format!("{} rendered vs {} target values", rendered.len(), target.len())));
    }
    let color = rendered.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let mask = match masks {
        Some((o, m)) => {
            if o.len() != m.len() || o.len() * 3 != rendered.len() {
                return Err(Error::shape("compute_loss", format!("{} opacities vs {} mask values", o.len(), m.len())));
            }
            o.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum()
        }
        None => 0.0,
    };
    let kl = 0.5 * latents.iter().map(|z| z.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
    Ok(LossReport {
        color,
        kl,
        mask,
        total: color + lambda_kl * kl + lambda_mask * mask,
        rays: rendered.len() / 3,
        ..LossReport::default()
    })
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Clone, Debug)]
pub struct Adam<R> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    /// One moment pair per parameter tensor of the given sizes.
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![R::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![R::zero(); n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bias-corrected update of each parameter with its own rate. Returns
    /// `false` and leaves everything untouched when a gradient is not finite.
    pub fn step(&mut self, params: &mut [&mut [R]], grads: &[&[R]], lrs: &[f64]) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || lrs.len() != self.m.len() {
            return Err(Error::shape("adam", format!("{} parameters for {} moment slots", params.len(), self.m.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::shape("adam", format!("parameter {i}: {} values, {} grads, {} moments", p.len(), g.len(), self.m[i].len())));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Ok(false);
        }
        self.step += 1;
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let eps = R::lit(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let step = R::lit(lrs[i] / c1);
            let c2 = R::lit(c2);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + (R::one() - b1) * g;
                v[j] = b2 * v[j] + (R::one() - b2) * g * g;
                p[j] -= step * m[j] / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(true)
    }
}

// ---------------------------------------------------------------------------
// Differentiable rendering of ray batches

/// Model parameters recorded on a graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub decoder: Vec<Var>,
    pub latents: Var,
    pub hash: Var,
    pub projector: Var,
}

impl ModelVars {
    /// Records every parameter as a tracked leaf.
    pub fn record<R: Real>(g: &mut Graph<R>, model: &Model<R>) -> Self {
        ModelVars {
            decoder: model.decoder.leaves(g),
            latents: g.leaf(model.latents.tensor().clone().tracked()),
            hash: g.leaf(model.hash.tensor().clone().tracked()),
            projector: g.leaf(model.projector.tensor().clone().tracked()),
        }
    }
}

/// Rays of one frame with their training samples.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub frame: usize,
    pub rays: Vec<Ray>,
    pub samples: Vec<RaySamples>,
}

/// Records rendering of a batch: returns the `[rays, 4]` color/opacity
/// output and the frame latent `[1, D]`.
pub fn render_batch_graph<R: Real>(g: &mut Graph<R>, model: &Model<R>, vars: &ModelVars, batch: &RayBatch) -> Result<(Var, Var)> {
    let z = g.select_rows(vars.latents, vec![batch.frame])?;
    let maps = decode_graph(g, &model.config.decoder, &vars.decoder, z)?;
    let planes = model.config.decoder.planes.planes();
    let bounds = model.bounds();
    let mut offsets = vec![0];
    let mut points = Vec::new();
    let mut deltas = Vec::new();
    let mut dirs = Vec::new();
    for (ray, s) in batch.rays.iter().zip(&batch.samples) {
        let enc = dir_encode(ray.dir.map(R::lit));
        for (&t, &d) in s.t.iter().zip(&s.delta) {
            points.push(bounds.to_unit(ray.at(t)).map(R::lit));
            deltas.push(R::lit(d));
            dirs.extend_from_slice(&enc);
        }
        offsets.push(points.len());
    }
    debug_assert_eq!(dirs.len(), points.len() * DIR_FEATURES);
    let time = R::lit(model.config.time(batch.frame));
    let n = points.len();
    let gamma = g.point_embed(vars.hash, &model.config.hash, vars.projector, maps.triplanes, points.clone(), time)?;
    let s = g.mlp_density(gamma, &maps.density, &planes, &points)?;
    let sigma = g.softplus(s)?;
    let logits = g.mlp_color(gamma, &maps.color, &planes, &points, dirs)?;
    let rgb = g.sigmoid(logits)?;
    debug_assert_eq!(g.value(sigma).shape(), &[n]);
    let out = g.composite(sigma, rgb, offsets, deltas)?;
    Ok((out, z))
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Rays drawn from each image of a step.
    pub batch_rays: usize,
    /// (frame, view) pairs per step.
    pub image_batch: usize,
    pub lr_net: f64,
    pub lr_hash: f64,
    /// Rates decay as `0.1^(epoch / decay_epochs)`.
    pub decay_epochs: f64,
    pub lambda_kl: f64,
    pub lambda_mask: f64,
    pub seed: u64,
    /// Views held out of training.
    pub holdout_views: Vec<usize>,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Stop early once this much wall-clock time has passed.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            steps_per_epoch: 50,
            batch_rays: 1024,
            image_batch: 8,
            lr_net: 5e-4,
            lr_hash: 5e-3,
            decay_epochs: 400.0,
            lambda_kl: DEFAULT_LAMBDA_KL,
            lambda_mask: DEFAULT_LAMBDA_MASK,
            seed: 0,
            holdout_views: Vec::new(),
            checkpoint_every: 0,
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    /// Group rates at a (fractional) epoch: (decoder/latents/projector, hash).
    pub fn rates(&self, epoch: f64) -> (f64, f64) {
        let k = 0.1f64.powf(epoch / self.decay_epochs);
        (self.lr_net * k, self.lr_hash * k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.batch_rays == 0 || self.image_batch == 0 {
            return Err(Error::Config("steps per epoch, ray batch and image batch must be positive".into()));
        }
        if !(self.decay_epochs > 0.0) {
            return Err(Error::Config("decay period must be positive".into()));
        }
        Ok(())
    }
}

/// Mean per-step losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub color: f64,
    pub kl: f64,
    pub mask: f64,
    pub total: f64,
    pub lr: f64,
    pub skipped_steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub curve: Vec<EpochRecord>,
    pub steps: usize,
    pub skipped_steps: usize,
    pub seconds: f64,
    pub stopped_early: bool,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainSummary {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,L_c,L_KL,L_m,total,lr\n");
        for r in &self.curve {
            let _ = writeln!(s, "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.6e}", r.epoch, r.color, r.kl, r.mask, r.total, r.lr);
        }
        s
    }
}

/// Median total loss of epochs `range` (1-based, inclusive).
pub fn median_loss(curve: &[EpochRecord], first: usize, last: usize) -> Option<f64> {
    let mut v: Vec<f64> = curve.iter().filter(|r| r.epoch >= first && r.epoch <= last).map(|r| r.total).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Gradients of one step, grouped like the model parameters.
#[derive(Clone, Debug)]
pub struct StepGrads<R> {
    pub decoder: Vec<Vec<R>>,
    pub latents: Vec<R>,
    pub hash: Vec<R>,
    pub projector: Vec<R>,
}

impl<R: Real> StepGrads<R> {
    /// L2 norms by group: decoder, latents, hash, projector.
    pub fn norms(&self) -> [f64; 4] {
        let n = |v: &[R]| v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        [self.decoder.iter().map(|g| n(g).powi(2)).sum::<f64>().sqrt(), n(&self.latents), n(&self.hash), n(&self.projector)]
    }
}

/// A sampled training batch: per image, its frame, rays and target
/// color/mask values.
#[derive(Clone, Debug)]
pub struct ImageRays {
    pub frame: usize,
    pub view: usize,
    pub rays: Vec<Ray>,
    pub samples: Vec<RaySamples>,
    pub target: Vec<[f64; 4]>,
}

/// Draws `image_batch` (frame, view) pairs and `batch_rays` pixels from each.
pub fn sample_batch(dataset: &Dataset, views: &[usize], config: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<ImageRays>> {
    let mut out = Vec::with_capacity(config.image_batch);
    for _ in 0..config.image_batch {
        let frame = rng.gen_range(0..dataset.frames());
        let view = views[rng.gen_range(0..views.len())];
        let cam = &dataset.cameras[view];
        let img = &dataset.images[frame][view];
        let pixels: Vec<(u32, u32)> =
            (0..config.batch_rays).map(|_| (rng.gen_range(0..cam.width), rng.gen_range(0..cam.height))).collect();
        let rays = gen_rays(cam, &pixels, dataset.bounds())?;
        let samples = rays.iter().map(|r| sample_train(r, rng)).collect();
        let target = pixels
            .iter()
            .map(|&(x, y)| {
                let i = (y * cam.width + x) as usize;
                [img.rgb[i * 3] as f64, img.rgb[i * 3 + 1] as f64, img.rgb[i * 3 + 2] as f64, img.alpha[i] as f64]
            })
            .collect();
        out.push(ImageRays { frame, view, rays, samples, target });
    }
    Ok(out)
}

/// Forward and backward pass for one batch. Images of the same frame share
/// one decode.
pub fn loss_and_grads<R: Real>(
    model: &Model<R>,
    batch: &[ImageRays],
    use_mask: bool,
    lambda_kl: f64,
    lambda_mask: f64,
) -> Result<(LossReport, StepGrads<R>)> {
    let mut g = Graph::new();
    let vars = ModelVars::record(&mut g, model);
    let mut by_frame: BTreeMap<usize, Vec<&ImageRays>> = BTreeMap::new();
    for img in batch {
        by_frame.entry(img.frame).or_default().push(img);
    }
    let mut terms = Vec::new();
    let (mut rendered, mut target, mut opac, mut masks) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut latents: Vec<Vec<f64>> = Vec::new();
    let mask_w = if use_mask { lambda_mask } else { 0.0 };
    for (&frame, imgs) in &by_frame {
        let rb = RayBatch {
            frame,
            rays: imgs.iter().flat_map(|i| i.rays.iter().copied()).collect(),
            samples: imgs.iter().flat_map(|i| i.samples.iter().cloned()).collect(),
        };
        let tgt: Vec<[f64; 4]> = imgs.iter().flat_map(|i| i.target.iter().copied()).collect();
        let (out, z) = render_batch_graph(&mut g, model, &vars, &rb).map_err(|e| component_error("render", e))?;
        let n = tgt.len();
        let tgt_flat: Vec<f64> = tgt.iter().flat_map(|t| [t[0], t[1], t[2], if use_mask { t[3] } else { 0.0 }]).collect();
        let tv = g.constant(Tensor::from_f64([n, 4], &tgt_flat)?);
        let wv = g.constant(Tensor::from_f64([1, 4], &[1.0, 1.0, 1.0, mask_w])?);
        let diff = g.sub(out, tv)?;
        let sq = g.mul(diff, diff)?;
        let weighted = g.mul(sq, wv)?;
        terms.push(g.sum(weighted)?);
        let zsq = g.sum_squares(z)?;
        terms.push(g.scale(zsq, R::lit(0.5 * lambda_kl * imgs.len() as f64))?);

        let vals = g.value(out).data();
        for (r, t) in vals.chunks_exact(4).zip(&tgt) {
            rendered.extend([r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]);
            target.extend([t[0], t[1], t[2]]);
            opac.push(r[3].as_f64());
            masks.push(t[3]);
        }
        let zval: Vec<f64> = g.value(z).data().iter().map(|v| v.as_f64()).collect();
        latents.extend(std::iter::repeat_n(zval, imgs.len()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let zrefs: Vec<&[f64]> = latents.iter().map(|z| z.as_slice()).collect();
    let report = compute_loss(&rendered, &target, use_mask.then_some((&opac[..], &masks[..])), &zrefs, lambda_kl, lambda_mask)?;
    let graph_total = g.value(total).item()?.as_f64();
    if !graph_total.is_finite() {
        return Err(Error::Training(format!("non-finite loss (L_c {}, L_KL {}, L_m {})", report.color, report.kl, report.mask)));
    }
    g.backward(total)?;
    let mut take = |v: Var, len: usize| g.take_grad(v).unwrap_or_else(|| vec![R::zero(); len]);
    let decoder = vars.decoder.iter().zip(model.decoder.tensors()).map(|(&v, t)| take(v, t.numel())).collect();
    let grads = StepGrads {
        decoder,
        latents: take(vars.latents, model.latents.tensor().numel()),
        hash: take(vars.hash, model.hash.tensor().numel()),
        projector: take(vars.projector, model.projector.tensor().numel()),
    };
    Ok((report, grads))
}

fn component_error(stage: &str, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Training(format!("non-finite values in {stage} at {op}")),
        other => other,
    }
}

/// Optimizer slot order: decoder tensors, latents, hash, projector.
fn param_sizes<R: Real>(model: &Model<R>) -> Vec<usize> {
    let mut s: Vec<usize> = model.decoder.tensors().iter().map(|t| t.numel()).collect();
    s.extend([model.latents.tensor().numel(), model.hash.tensor().numel(), model.projector.tensor().numel()]);
    s
}

/// Applies one optimizer update; returns `false` if it was skipped.
pub fn apply_step<R: Real>(model: &mut Model<R>, adam: &mut Adam<R>, grads: &StepGrads<R>, lr_net: f64, lr_hash: f64) -> Result<bool> {
    let n_dec = model.decoder.tensors().len();
    let mut lrs = vec![lr_net; n_dec];
    lrs.extend([lr_net, lr_hash, lr_net]);
    let mut gs: Vec<&[R]> = grads.decoder.iter().map(|g| g.as_slice()).collect();
    gs.extend([grads.latents.as_slice(), grads.hash.as_slice(), grads.projector.as_slice()]);
    let Model { decoder, latents, hash, projector, .. } = model;
    let mut params: Vec<&mut [R]> = decoder.tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
    params.push(latents.tensor_mut().data_mut());
    params.push(hash.tensor_mut().data_mut());
    params.push(projector.tensor_mut().data_mut());
    adam.step(&mut params, &gs, &lrs)
}

/// Trains `model` on `dataset`. Checkpoints and `loss_curve.csv` go to
/// `out` when given; `progress` sees every finished epoch.
pub fn train<R: Real>(
    model: &mut Model<R>,
    dataset: &Dataset,
    config: &TrainConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    config.validate()?;
    if dataset.frames() != model.frames() {
        return Err(Error::Config(format!("dataset has {} frames, model {}", dataset.frames(), model.frames())));
    }
    let views: Vec<usize> = (0..dataset.cameras.len()).filter(|v| !config.holdout_views.contains(v)).collect();
    if views.is_empty() {
        return Err(Error::Config("every view is held out".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&param_sizes(model));
    let start = Instant::now();
    let mut summary = TrainSummary::default();
    'outer: for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let mut acc = EpochRecord { epoch: epoch + 1, color: 0.0, kl: 0.0, mask: 0.0, total: 0.0, lr: 0.0, skipped_steps: 0, seconds: 0.0 };
        let mut done = 0;
        for step in 0..config.steps_per_epoch {
            if let Some(budget) = config.time_budget_secs {
                if start.elapsed().as_secs_f64() > budget {
                    summary.stopped_early = true;
                    if done > 0 {
                        finish_epoch(&mut acc, done, t0);
                        progress(&acc);
                        summary.curve.push(acc);
                    }
                    break 'outer;
                }
            }
            let (lr_net, lr_hash) = config.rates(epoch as f64 + step as f64 / config.steps_per_epoch as f64);
            let batch = sample_batch(dataset, &views, config, &mut rng)?;
            let (report, grads) = loss_and_grads(model, &batch, dataset.has_masks(), config.lambda_kl, config.lambda_mask)?;
            if !apply_step(model, &mut adam, &grads, lr_net, lr_hash)? {
                log::warn!("epoch {} step {step}: non-finite gradient, update skipped", epoch + 1);
                acc.skipped_steps += 1;
            }
            acc.color += report.color;
            acc.kl += report.kl;
            acc.mask += report.mask;
            acc.total += report.total;
            acc.lr = lr_net;
            done += 1;
            summary.steps += 1;
        }
        finish_epoch(&mut acc, done, t0);
        summary.skipped_steps += acc.skipped_steps;
        progress(&acc);
        summary.curve.push(acc);
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                let path = dir.join(format!("epoch{:05}.ckpt", epoch + 1));
                save_checkpoint(model, &path)?;
                summary.checkpoints.push(path);
            }
        }
    }
    summary.seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("loss_curve.csv"), summary.curve_csv())?;
        let path = dir.join("model.ckpt");
        save_checkpoint(model, &path)?;
        summary.checkpoints.push(path);
    }
    Ok(summary)
}

fn finish_epoch(acc: &mut EpochRecord, steps: usize, t0: Instant) {
    let n = steps.max(1) as f64;
    acc.color /= n;
    acc.kl /= n;
    acc.mask /= n;
    acc.total /= n;
    acc.seconds = t0.elapsed().as_secs_f64();
}
