//! Subcommands of the `mlpmaps` binary and the HTTP render service.

pub mod server;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mlpmaps::appsvc::{self, default_camera, Pose, RenderRequest, Service, ServiceOptions, DEFAULT_FOV_DEG, DEFAULT_MAX_RESOLUTION};
use mlpmaps::diffkernel::{Precision, Real};
use mlpmaps::encodings::HashConfig;
use mlpmaps::hypernet::{DecoderConfig, MapPlanes};
use mlpmaps::model::{Model, ModelConfig, Renderable};
use mlpmaps::occupancy::{OccupancyVolume, DEFAULT_TAU1};
use mlpmaps::renderer::Camera;
use mlpmaps::scenekit::{checkpoint_from_bytes, checkpoint_header, gen_synthetic, load_dataset, SyntheticScene, SyntheticSpec};
use mlpmaps::trainer::{self, TrainConfig};

pub const ADDR_ENV: &str = "MLPMAPS_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(name = "mlpmaps", version, about = "Train and render volumetric video with MLP maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Fit a model to a multi-view dataset.
    Train(TrainArgs),
    /// Render one frame from a pose to PNG.
    Render(RenderArgs),
    /// Build occupancy volumes for every frame.
    BuildOcc(BuildOccArgs),
    /// Time rendering with and without empty-space skipping.
    Bench(BenchArgs),
    /// Serve /meta and /render over HTTP.
    Serve(ServeArgs),
    /// Dump latents, occupancy or decoded maps.
    Export(ExportArgs),
    /// Write a synthetic multi-view dataset with known geometry.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub frame: usize,
    /// Pose as inline JSON or a path to a JSON file:
    /// `{"position":[..],"look_at":[..],"up":[..]}` or `{"extrinsics":[[..],[..],[..]]}`.
    /// Defaults to the model's default camera.
    #[arg(long)]
    pub pose: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub width: u32,
    #[arg(long, default_value_t = 512)]
    pub height: u32,
    /// Vertical field of view in degrees.
    #[arg(long)]
    pub fov: Option<f64>,
    #[arg(long)]
    pub no_ess: bool,
    #[arg(long)]
    pub no_two_stage: bool,
    /// Directory of prebuilt `.occ` files.
    #[arg(long)]
    pub occ: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU1)]
    pub tau1: f32,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildOccArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU1)]
    pub tau1: f32,
    /// Comma-separated frames or `all`.
    #[arg(long, default_value = "all")]
    pub frames: String,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated frames or `all`.
    #[arg(long, default_value = "all")]
    pub frames: String,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub width: u32,
    #[arg(long, default_value_t = 256)]
    pub height: u32,
    #[arg(long, default_value_t = DEFAULT_TAU1)]
    pub tau1: f32,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, env = ADDR_ENV, default_value = DEFAULT_ADDR)]
    pub addr: String,
    #[arg(long)]
    pub occ: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU1)]
    pub tau1: f32,
    #[arg(long, default_value_t = DEFAULT_MAX_RESOLUTION)]
    pub max_resolution: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportWhat {
    Latents,
    Occ,
    Maps,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub what: ExportWhat,
    #[arg(long)]
    pub out: PathBuf,
    /// Frame for `maps`; occupancy exports every frame when omitted.
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TAU1)]
    pub tau1: f32,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub frames: usize,
    #[arg(long, default_value_t = 12)]
    pub cameras: usize,
    #[arg(long, default_value_t = 128)]
    pub resolution: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Full,
}

/// Contents of `train --config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub precision: Precision,
    pub seed: u64,
    pub planes: MapPlanes,
    /// Replaces the preset decoder.
    pub decoder: Option<DecoderConfig>,
    /// Replaces the preset hash grid.
    pub hash: Option<HashConfig>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn model_config(&self, frames: usize, bounds: mlpmaps::renderer::SceneBounds) -> ModelConfig {
        let mut c = match self.preset {
            Preset::Toy => ModelConfig::toy(frames, bounds),
            Preset::Full => ModelConfig::full(frames, bounds),
        };
        if let Some(d) = &self.decoder {
            c.decoder = d.clone();
        }
        if let Some(h) = &self.hash {
            c.hash = h.clone();
        }
        c.decoder.planes = self.planes;
        c.precision = self.precision;
        c.seed = self.seed;
        c
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, &cli.command),
        Command::Render(a) => cmd_render(a, &cli.command),
        Command::BuildOcc(a) => cmd_build_occ(a, &cli.command),
        Command::Bench(a) => cmd_bench(a, &cli.command),
        Command::Serve(a) => cmd_serve(a),
        Command::Export(a) => cmd_export(a, &cli.command),
        Command::Synth(a) => cmd_synth(a, &cli.command),
    }
}

/// Writes `{command, flags, version, result}` next to an output.
fn provenance(path: &Path, command: &Command, result: serde_json::Value) -> anyhow::Result<()> {
    let doc = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "invocation": command,
        "result": result,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_train(a: &TrainArgs, command: &Command) -> anyhow::Result<()> {
    let cfg: RunConfig = match &a.config {
        Some(p) => serde_json::from_slice(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfig::default(),
    };
    let dataset = load_dataset(&a.data)?;
    let mc = cfg.model_config(dataset.frames(), *dataset.bounds());
    std::fs::create_dir_all(&a.out)?;
    let summary = match mc.precision {
        Precision::F32 => train_as::<f32>(mc, &dataset, &cfg.train, &a.out)?,
        Precision::F64 => train_as::<f64>(mc, &dataset, &cfg.train, &a.out)?,
    };
    let last = summary.curve.last().map(|r| r.total);
    println!("trained {} steps in {:.1}s, final loss {:?}", summary.steps, summary.seconds, last);
    let mut result = serde_json::to_value(&summary)?;
    result["config"] = serde_json::to_value(&cfg)?;
    provenance(&a.out.join("train.json"), command, result)
}

fn train_as<R: Real>(mc: ModelConfig, dataset: &mlpmaps::scenekit::Dataset, tc: &TrainConfig, out: &Path) -> anyhow::Result<trainer::TrainSummary> {
    let mut model = Model::<R>::init(mc)?;
    Ok(trainer::train(&mut model, dataset, tc, Some(out), |r| {
        log::info!("epoch {} loss {:.5} (L_c {:.5}, L_m {:.5}) lr {:.2e} {:.1}s", r.epoch, r.total, r.color, r.mask, r.lr, r.seconds);
    })?)
}

/// Parses `--pose`: inline JSON when it starts with `{`, otherwise a file.
pub fn parse_pose(arg: &str) -> anyhow::Result<Pose> {
    let text = if arg.trim_start().starts_with('{') { arg.to_string() } else { String::from_utf8(read(Path::new(arg))?)? };
    serde_json::from_str(&text).context("pose must be {position, look_at, up} or {extrinsics}")
}

pub fn open_service(ckpt: &Path, occ: Option<&Path>, options: ServiceOptions) -> anyhow::Result<Arc<dyn Service>> {
    let service = appsvc::load_service(&read(ckpt)?, options).with_context(|| format!("loading {}", ckpt.display()))?;
    if let Some(dir) = occ {
        let bounds = service.meta().bounds;
        for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "occ") {
                let vol = OccupancyVolume::deserialize(&read(&path)?, bounds).with_context(|| format!("loading {}", path.display()))?;
                service.insert_occupancy(vol);
            }
        }
    }
    Ok(service)
}

fn cmd_render(a: &RenderArgs, command: &Command) -> anyhow::Result<()> {
    let service = open_service(&a.ckpt, a.occ.as_deref(), ServiceOptions { tau1: a.tau1, ..Default::default() })?;
    let meta = service.meta();
    let dc = default_camera(&meta.bounds);
    let pose = match &a.pose {
        Some(p) => parse_pose(p)?,
        None => Pose::LookAt { position: dc.position, look_at: dc.look_at, up: dc.up },
    };
    let req = RenderRequest {
        frame: a.frame,
        pose,
        fov_deg: a.fov.unwrap_or(if a.pose.is_some() { DEFAULT_FOV_DEG } else { dc.fov_deg }),
        width: a.width,
        height: a.height,
        use_ess: !a.no_ess,
        two_stage: !a.no_two_stage,
    };
    let out = service.render(&req)?;
    std::fs::write(&a.out, &out.png).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} ({}x{}, {:.1} ms)", a.out.display(), a.width, a.height, out.millis);
    provenance(&sidecar(&a.out), command, serde_json::json!({ "request": req, "millis": out.millis, "model_id": meta.model_id }))
}

/// `all` or a comma-separated list, checked against `frames`.
pub fn parse_frames(spec: &str, frames: usize) -> anyhow::Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..frames).collect());
    }
    let list = spec.split(',').map(|s| s.trim().parse::<usize>().with_context(|| format!("bad frame '{s}'"))).collect::<anyhow::Result<Vec<_>>>()?;
    if let Some(f) = list.iter().find(|&&f| f >= frames) {
        bail!("frame {f} out of range (model has {frames})");
    }
    Ok(list)
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn load_model(path: &Path) -> anyhow::Result<AnyModel> {
    let bytes = read(path)?;
    let (precision, _) = checkpoint_header(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok(match precision {
        Precision::F32 => AnyModel::F32(checkpoint_from_bytes(&bytes)?),
        Precision::F64 => AnyModel::F64(checkpoint_from_bytes(&bytes)?),
    })
}

fn build_occ_files<R: Real>(model: Model<R>, frames: &str, tau1: f32, out: &Path) -> anyhow::Result<Vec<serde_json::Value>> {
    let frames = parse_frames(frames, model.frames())?;
    let renderable = Renderable::new(model, 1);
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for f in frames {
        let vol = appsvc::build_occupancy(&renderable, f, tau1)?;
        let path = out.join(format!("frame_{f:04}.occ"));
        std::fs::write(&path, vol.serialize())?;
        let total: usize = vol.resolution().iter().product();
        println!("{} occupied {}/{}", path.display(), vol.occupied_count(), total);
        written.push(serde_json::json!({ "frame": f, "path": path, "occupied": vol.occupied_count(), "voxels": total }));
    }
    Ok(written)
}

fn cmd_build_occ(a: &BuildOccArgs, command: &Command) -> anyhow::Result<()> {
    let written = match load_model(&a.ckpt)? {
        AnyModel::F32(m) => build_occ_files(m, &a.frames, a.tau1, &a.out)?,
        AnyModel::F64(m) => build_occ_files(m, &a.frames, a.tau1, &a.out)?,
    };
    provenance(&a.out.join("occupancy.json"), command, serde_json::json!({ "volumes": written }))
}

/// Default camera of a scene at the given resolution.
pub fn bench_camera(bounds: &mlpmaps::renderer::SceneBounds, width: u32, height: u32) -> anyhow::Result<Camera> {
    let dc = default_camera(bounds);
    Ok(Camera::look_at(dc.position, dc.look_at, dc.up, dc.fov_deg, width, height)?)
}

fn cmd_bench(a: &BenchArgs, command: &Command) -> anyhow::Result<()> {
    let service = open_service(&a.ckpt, None, ServiceOptions::default())?;
    let meta = service.meta();
    let frames = parse_frames(&a.frames, meta.frames)?;
    let cam = bench_camera(&meta.bounds, a.width, a.height)?;
    let report = service.bench(&frames, &cam, a.tau1, a.repeats)?;
    println!("frame   ESS on ms   ESS off ms   PSNR dB   occupied");
    for f in &report.frames {
        println!("{:5} {:11.1} {:12.1} {:9.2} {:9.1}%", f.frame, f.ms_ess, f.ms_full, f.psnr, 100.0 * f.occupied_fraction);
    }
    println!("ms/frame: {:.1} with ESS, {:.1} without; speedup {:.2}x", report.ms_per_frame_ess, report.ms_per_frame_full, report.speedup);
    provenance(&a.report, command, serde_json::to_value(&report)?)
}

fn cmd_serve(a: &ServeArgs) -> anyhow::Result<()> {
    let options = ServiceOptions { max_resolution: a.max_resolution, tau1: a.tau1, ..Default::default() };
    let service = open_service(&a.ckpt, a.occ.as_deref(), options)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        println!("serving {} on http://{}", a.ckpt.display(), listener.local_addr()?);
        server::serve(listener, service).await
    })
}

fn export_as<R: Real>(model: Model<R>, a: &ExportArgs) -> anyhow::Result<serde_json::Value> {
    match a.what {
        ExportWhat::Latents => {
            let rows: Vec<Vec<f64>> = (0..model.frames()).map(|f| model.latents.latent(f).map(|z| z.iter().map(|v| v.as_f64()).collect())).collect::<Result<_, _>>()?;
            let doc = serde_json::json!({ "frames": model.frames(), "dim": model.latents.dim(), "latents": rows });
            std::fs::write(&a.out, serde_json::to_string(&doc)?)?;
            Ok(serde_json::json!({ "path": a.out }))
        }
        ExportWhat::Occ => {
            let frames = a.frame.map_or_else(|| "all".to_string(), |f| f.to_string());
            Ok(serde_json::json!({ "volumes": build_occ_files(model, &frames, a.tau1, &a.out)? }))
        }
        ExportWhat::Maps => {
            let frame = a.frame.unwrap_or(0);
            let maps = model.decode(frame)?;
            std::fs::create_dir_all(&a.out)?;
            let mut blob = Vec::new();
            let mut index = Vec::new();
            let mut push = |name: String, shape: Vec<usize>, data: &[R]| {
                index.push(serde_json::json!({ "name": name, "shape": shape, "offset": blob.len() }));
                for v in data {
                    match R::PRECISION {
                        Precision::F32 => blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                        Precision::F64 => blob.extend_from_slice(&v.as_f64().to_le_bytes()),
                    }
                }
            };
            for (kind, list) in [("density", maps.density_maps()), ("color", maps.color_maps())] {
                for m in list {
                    let name = format!("{kind}.{}", format!("{:?}", m.plane()).to_lowercase());
                    push(name, vec![m.resolution(), m.resolution(), m.cell_params()], m.params());
                }
            }
            let tp = maps.triplanes().tensor();
            push("triplanes".into(), tp.shape().to_vec(), tp.data());
            std::fs::write(a.out.join("maps.bin"), &blob)?;
            let doc = serde_json::json!({ "frame": frame, "precision": R::PRECISION, "byte_order": "little", "tensors": index });
            std::fs::write(a.out.join("maps.json"), serde_json::to_string_pretty(&doc)?)?;
            Ok(serde_json::json!({ "path": a.out, "bytes": blob.len() }))
        }
    }
}

fn cmd_export(a: &ExportArgs, command: &Command) -> anyhow::Result<()> {
    let result = match load_model(&a.ckpt)? {
        AnyModel::F32(m) => export_as(m, a)?,
        AnyModel::F64(m) => export_as(m, a)?,
    };
    let side = if a.what == ExportWhat::Latents { sidecar(&a.out) } else { a.out.join("export.json") };
    provenance(&side, command, result)
}

fn cmd_synth(a: &SynthArgs, command: &Command) -> anyhow::Result<()> {
    let spec = SyntheticSpec { frames: a.frames, cameras: a.cameras, resolution: a.resolution, seed: a.seed };
    let scene = SyntheticScene::random(a.seed);
    let ds = gen_synthetic(&scene, &spec, &a.out)?;
    println!("{}: {} frames x {} cameras", a.out.display(), ds.frames(), ds.cameras.len());
    provenance(&a.out.join("synth.json"), command, serde_json::json!({ "spec": spec }))
}
