//! Subcommands of the `wildrecon` binary: argument types and the pipeline
//! steps they run. `main.rs` only parses, dispatches and maps errors to exit
//! codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use wildrecon::bench::{default_mesh_density, evaluate, icp_align, EvalParams, IcpParams, IcpResult};
use wildrecon::field::load_checkpoint;
use wildrecon::meshing::{marching_cubes, sample_mesh_points};
use wildrecon::sampling::{export_samples_ply, ray_rng, SamplerContext, SdfCache, Strategy};
use wildrecon::scene_io::{load_ply, load_scene, save_ply, PlyData, PlyEncoding, SceneConfig};
use wildrecon::synth::{synthesize, write_synth_scene, Shape, SynthParams};
use wildrecon::trainer::{build_envelope, pixel_ray, run_training, RayPool, Trainer};
use wildrecon::{Error, Exec, Vec3};

#[derive(Debug, Parser)]
#[command(name = "wildrecon", version, about = "Neural SDF reconstruction with hybrid ray sampling")]
pub struct Cli {
    /// Worker threads; 1 runs everything on the calling thread and is fully
    /// deterministic.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Overrides the seed of the subcommand's randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render an analytic shape into a scene directory.
    Synth(SynthArgs),
    /// Train a field on a scene directory.
    Train(TrainArgs),
    /// Extract a mesh from a checkpoint inside the voxel envelope.
    Mesh(MeshArgs),
    /// Compare a predicted mesh or point cloud against ground truth.
    Eval(EvalArgs),
    /// Rigidly register a source cloud onto a target cloud.
    Align(AlignArgs),
    /// Export the samples drawn along a subset of training rays.
    SampleViz(SampleVizArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "sphere")]
    pub shape: String,
    #[arg(long, default_value_t = 16)]
    pub n_views: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: u32,
    #[arg(long, default_value_t = 0.2)]
    pub tint_strength: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sky_fraction: f64,
    #[arg(long, default_value_t = 3000)]
    pub n_points: usize,
    /// Points in the ground-truth cloud `gt.ply`.
    #[arg(long, default_value_t = 20_000)]
    pub gt_points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Scene configuration JSON; defaults to `<scene>/config.json` when
    /// present, otherwise built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub iters: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cells_per_voxel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Mesh (sampled by area) or point cloud.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Surface points per unit area when `pred` is a mesh.
    #[arg(long)]
    pub density: Option<f64>,
    /// Register `pred` onto `gt` before scoring.
    #[arg(long)]
    pub align: bool,
    /// JSON report path; the table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Writes the transform as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Writes the transformed source cloud.
    #[arg(long)]
    pub aligned: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleVizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the checkpoint's strategy at its iteration.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long, default_value_t = 256)]
    pub rays: usize,
}

/// Failure classes with their process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::UnknownShape(_) => 1,
                Error::NonFinite { .. } | Error::TooFewCorrespondences(_) | Error::ThresholdNotReached { .. } => 3,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

pub fn run(cli: Cli) -> CliResult<()> {
    wildrecon::exec::configure_threads(cli.threads);
    let exec = Exec::from_threads(cli.threads);
    match cli.command {
        Command::Synth(a) => synth(&a, cli.seed),
        Command::Train(a) => train(&a, cli.seed, exec),
        Command::Mesh(a) => mesh(&a, exec),
        Command::Eval(a) => eval(&a, cli.seed, exec),
        Command::Align(a) => align(&a, exec),
        Command::SampleViz(a) => sample_viz(&a, cli.seed, exec),
    }
}

pub fn synth(a: &SynthArgs, seed: Option<u64>) -> CliResult<()> {
    let shape: Shape = a.shape.parse()?;
    let params = SynthParams {
        shape,
        n_views: a.n_views,
        resolution: a.resolution,
        tint_strength: a.tint_strength,
        sky_fraction: a.sky_fraction,
        seed: seed.unwrap_or(0),
        n_points: a.n_points,
        ..SynthParams::default()
    };
    let scene = synthesize(&params)?;
    write_synth_scene(&a.out, &scene, a.gt_points)?;
    log::info!("wrote {} views to {}", a.n_views, a.out.display());
    Ok(())
}

/// Explicit `--config`, else `<scene>/config.json`, else defaults.
pub fn resolve_config(scene: &Path, config: Option<&Path>) -> CliResult<SceneConfig> {
    match config {
        Some(p) => {
            require(p, "config")?;
            Ok(SceneConfig::load(p)?)
        }
        None if scene.join("config.json").exists() => Ok(SceneConfig::load(&scene.join("config.json"))?),
        None => Ok(SceneConfig::default()),
    }
}

pub fn train(a: &TrainArgs, seed: Option<u64>, exec: Exec) -> CliResult<()> {
    require(&a.scene, "scene directory")?;
    let mut cfg = resolve_config(&a.scene, a.config.as_deref())?;
    if let Some(s) = a.strategy {
        cfg.schedule.strategy = s;
    }
    if let Some(n) = a.iters {
        cfg.schedule.total_iters = n;
        cfg.schedule.bootstrap_iters = cfg.schedule.bootstrap_iters.min(n);
    }
    if let Some(s) = seed {
        cfg.schedule.seed = s;
    }
    cfg.scene_dir = Some(a.scene.clone());
    cfg.out_dir = Some(a.out.clone());
    cfg.validate()?;
    let scene = load_scene(&a.scene)?;
    let mut trainer = Trainer::new(cfg, scene, exec)?;
    log::info!("ray pool keeps {:.1}% of pixels", 100.0 * trainer.pool.kept_fraction());
    let outcome = run_training(&mut trainer, Some(&a.out), |_, _| {})?;
    if let Some(last) = outcome.checkpoints.last() {
        println!("{}", last.display());
    }
    Ok(())
}

pub fn mesh(a: &MeshArgs, exec: Exec) -> CliResult<()> {
    require(&a.checkpoint, "checkpoint")?;
    require(&a.scene, "scene directory")?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let scene = load_scene(&a.scene)?;
    let grid = build_envelope(&scene, &ckpt.config)?;
    let cells = a.cells_per_voxel.unwrap_or(ckpt.config.mesh.cells_per_voxel);
    let mut mesh = marching_cubes(&ckpt.field, &grid, cells, exec)?;
    mesh.compute_normals();
    mesh.save(&a.out)?;
    println!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
    Ok(())
}

/// Points of a PLY file; meshes are sampled by area at `density`, or at the
/// default density for the `reference` cloud.
pub fn load_points(path: &Path, density: Option<f64>, reference: Option<&[Vec3]>, seed: u64) -> CliResult<Vec<Vec3>> {
    require(path, "point cloud")?;
    let ply = load_ply(path)?;
    if ply.faces.is_empty() {
        return Ok(ply.positions);
    }
    let mesh = wildrecon::meshing::TriMesh::from_ply(&ply);
    let density = density.unwrap_or_else(|| reference.map_or(1e4, default_mesh_density));
    Ok(sample_mesh_points(&mesh, density, seed)?)
}

pub fn eval(a: &EvalArgs, seed: Option<u64>, exec: Exec) -> CliResult<()> {
    let gt = load_points(&a.gt, None, None, 0)?;
    let mut pred = load_points(&a.pred, a.density, Some(&gt), seed.unwrap_or(0))?;
    if a.align {
        let icp = icp_align(&pred, &gt, &IcpParams::default(), exec)?;
        pred = icp.transform.apply_all(&pred);
    }
    let report = evaluate(&pred, &gt, &EvalParams::default(), exec)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_text(out, &serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    }
    Ok(())
}

pub fn align_clouds(source: &[Vec3], target: &[Vec3], exec: Exec) -> CliResult<IcpResult> {
    Ok(icp_align(source, target, &IcpParams::default(), exec)?)
}

pub fn align(a: &AlignArgs, exec: Exec) -> CliResult<()> {
    let source = load_points(&a.source, None, None, 0)?;
    let target = load_points(&a.target, None, None, 0)?;
    let res = align_clouds(&source, &target, exec)?;
    let json = serde_json::to_string_pretty(&res).map_err(Error::from)?;
    println!("{json}");
    if let Some(out) = &a.out {
        write_text(out, &json)?;
    }
    if let Some(out) = &a.aligned {
        save_ply(out, &PlyData::from_points(res.transform.apply_all(&source)), PlyEncoding::BinaryLittleEndian)?;
    }
    Ok(())
}

pub fn sample_viz(a: &SampleVizArgs, seed: Option<u64>, exec: Exec) -> CliResult<()> {
    require(&a.checkpoint, "checkpoint")?;
    require(&a.scene, "scene directory")?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let scene = load_scene(&a.scene)?;
    let cfg = &ckpt.config;
    let grid = build_envelope(&scene, cfg)?;
    let bounds = grid.bounds().ok_or(Error::EmptyGrid)?;
    let strategy = a.strategy.unwrap_or_else(|| cfg.schedule.strategy_at(ckpt.iteration));
    let mut cache = SdfCache::new(&grid, cfg.octree_depth, cfg.schedule.refresh_period)?;
    cache.refresh(&ckpt.field, ckpt.iteration, exec);
    let scfg = wildrecon::sampling::SamplingConfig::from_scene(cfg, &bounds, strategy);
    let ctx = SamplerContext { grid: &grid, cache: Some(&cache), field: &ckpt.field, cfg: &scfg };

    // Evenly spaced non-sky pixels of the ray pool.
    let pool = RayPool::build(&scene, &grid, exec);
    let hits: Vec<_> = pool.entries.iter().filter(|e| !e.sky).collect();
    if hits.is_empty() {
        return Err(Error::EmptyBatch.into());
    }
    let n = a.rays.min(hits.len()).max(1);
    let seed = seed.unwrap_or(cfg.schedule.seed);
    let samples = exec.map_range(n, |r| {
        let e = hits[r * hits.len() / n];
        let ray = pixel_ray(&scene, e.image as usize, e.pixel as usize);
        ctx.sample(&ray, &mut ray_rng(seed, ckpt.iteration, r as u64))
    });
    export_samples_ply(&a.out, &samples)?;
    println!("{} rays, {} samples", n, samples.iter().map(|s| s.len()).sum::<usize>());
    Ok(())
}
