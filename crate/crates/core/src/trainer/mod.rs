//! Losses, ray batches and the training loop.
//!
//! Each step samples a batch of eligible pixels, samples their rays with the
//! scheduled strategy, renders them and backpropagates
//! `color * L_color + eikonal * L_eik + mask * L_mask` into the field and the
//! density sharpness. Rays are processed in fixed-size chunks whose gradients
//! are summed in chunk order, so the result does not depend on the thread
//! count.

mod run;

pub use run::{run_training, LogRow, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::{Checkpoint, FieldCotangent, FieldGrads, FieldQuery, NeuralField, Normalization};
use crate::geometry::{Aabb, Ray, SparseVoxelGrid, Vec3};
use crate::renderer::{midpoints, render, render_backward, LogisticDensity, RenderCotangent};
use crate::sampling::{ray_rng, RaySamples, SamplerContext, SamplingConfig, SdfCache, Strategy};
use crate::scene_io::{filter_sfm_points, Scene, SceneConfig};
use crate::{Error, Exec, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub color: f64,
    pub eikonal: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { color: 1.0, eikonal: 0.1, mask: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.color, self.eikonal, self.mask].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and non-negative".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Voxel-guided iterations before surface-guided sampling is added.
    pub bootstrap_iters: u64,
    pub total_iters: u64,
    pub batch_rays: usize,
    /// Iterations between SDF cache refreshes once hybrid sampling is active.
    pub refresh_period: u64,
    pub learning_rate: f64,
    /// Multiplier on the learning rate of the density sharpness.
    pub density_lr_scale: f64,
    /// Iterations of linear learning-rate ramp-up from zero.
    pub warmup_iters: u64,
    /// Learning rate at the last iteration, as a fraction of the initial one.
    pub final_lr_fraction: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints (initial and final are still written).
    pub checkpoint_every: u64,
    /// `hybrid` runs the voxel bootstrap first; `sphere` and `voxel` are used
    /// throughout.
    pub strategy: Strategy,
    /// Rays per forward/backward work item.
    pub chunk_rays: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            bootstrap_iters: 5000,
            total_iters: 20_000,
            batch_rays: 1024,
            refresh_period: 2000,
            learning_rate: 5e-4,
            density_lr_scale: 10.0,
            warmup_iters: 500,
            final_lr_fraction: 0.05,
            seed: 0,
            checkpoint_every: 1000,
            strategy: Strategy::Hybrid,
            chunk_rays: 16,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.strategy == Strategy::Hybrid && self.bootstrap_iters > self.total_iters {
            return bad("bootstrap_iters must not exceed total_iters");
        }
        if self.batch_rays == 0 || self.chunk_rays == 0 {
            return bad("batch_rays and chunk_rays must be >= 1");
        }
        if self.refresh_period == 0 {
            return bad("refresh_period must be >= 1");
        }
        if !(self.learning_rate >= 0.0) || !(self.density_lr_scale >= 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("learning rate must be >= 0 and final_lr_fraction in [0, 1]");
        }
        Ok(())
    }

    /// Sampling strategy used at `iteration`.
    pub fn strategy_at(&self, iteration: u64) -> Strategy {
        match self.strategy {
            Strategy::Hybrid if iteration < self.bootstrap_iters => Strategy::Voxel,
            s => s,
        }
    }

    /// Cosine decay from `learning_rate` to `final_lr_fraction * learning_rate`,
    /// scaled by a linear ramp over the first `warmup_iters` iterations.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let progress = if self.total_iters == 0 { 1.0 } else { (iteration as f64 / self.total_iters as f64).min(1.0) };
        let f = self.final_lr_fraction;
        let ramp = if iteration < self.warmup_iters { (iteration + 1) as f64 / self.warmup_iters as f64 } else { 1.0 };
        ramp * self.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Mean absolute error over rays and channels.
pub fn color_loss(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    assert_eq!(rendered.len(), target.len());
    if rendered.is_empty() {
        return 0.0;
    }
    let sum: f64 = rendered.iter().zip(target).map(|(r, t)| (0..3).map(|k| (r[k] - t[k]).abs()).sum::<f64>()).sum();
    sum / (3 * rendered.len()) as f64
}

/// Mean of `(|g| - 1)^2`.
pub fn eikonal_loss(grads: &[Vec3]) -> f64 {
    if grads.is_empty() {
        return 0.0;
    }
    grads.iter().map(|g| (g.norm() - 1.0).powi(2)).sum::<f64>() / grads.len() as f64
}

const MASK_CLAMP: f64 = 1e-5;

/// Binary cross-entropy of sky-ray opacities against a target of zero.
pub fn mask_loss(opacities: &[f64]) -> f64 {
    if opacities.is_empty() {
        return 0.0;
    }
    opacities.iter().map(|o| mask_term(*o).0).sum::<f64>() / opacities.len() as f64
}

/// `-ln(1 - clamp(o))` and its derivative (zero where the clamp is active).
fn mask_term(o: f64) -> (f64, f64) {
    let c = o.clamp(MASK_CLAMP, 1.0 - MASK_CLAMP);
    let d = if o > MASK_CLAMP && o < 1.0 - MASK_CLAMP { 1.0 / (1.0 - o) } else { 0.0 };
    (-(1.0 - c).ln(), d)
}

/// `d/dg (|g| - 1)^2`.
fn eikonal_grad(g: &Vec3) -> Vec3 {
    let n = g.norm();
    if n > 0.0 {
        g * (2.0 * (n - 1.0) / n)
    } else {
        Vec3::zeros()
    }
}

/// One trainable pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRef {
    pub image: u32,
    pub pixel: u32,
    pub sky: bool,
}

/// Pixels eligible for training: not transient, and either sky-flagged or
/// looking through the voxel envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct RayPool {
    pub entries: Vec<PixelRef>,
    pub total_pixels: usize,
}

/// Ray through the center of a pixel given by its linear index.
pub fn pixel_ray(scene: &Scene, image: usize, pixel: usize) -> Ray {
    let cam = &scene.images[image].camera;
    let (x, y) = (pixel as u32 % cam.width, pixel as u32 / cam.width);
    cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5)
}

impl RayPool {
    pub fn build(scene: &Scene, grid: &SparseVoxelGrid, exec: Exec) -> Self {
        let mut entries = Vec::new();
        let mut total_pixels = 0;
        for (i, img) in scene.images.iter().enumerate() {
            let n = img.pixels.len();
            total_pixels += n;
            let keep = exec.map_range(n, |p| {
                if img.transient[p] {
                    false
                } else {
                    img.sky[p] || grid.ray_intersect(&pixel_ray(scene, i, p)).is_some()
                }
            });
            entries.extend(
                keep.iter()
                    .enumerate()
                    .filter(|(_, k)| **k)
                    .map(|(p, _)| PixelRef { image: i as u32, pixel: p as u32, sky: img.sky[p] }),
            );
        }
        RayPool { entries, total_pixels }
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.total_pixels == 0 {
            0.0
        } else {
            self.entries.len() as f64 / self.total_pixels as f64
        }
    }
}

/// Rays with supervision. Transient pixels never appear here.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
    pub images: Vec<usize>,
    pub sky: Vec<bool>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn push(&mut self, ray: Ray, target: [f64; 3], image: usize, sky: bool) {
        self.rays.push(ray);
        self.targets.push(target);
        self.images.push(image);
        self.sky.push(sky);
    }
}

/// Uniform draw (with replacement) of `n` eligible pixels.
pub fn make_batch(pool: &RayPool, scene: &Scene, n: usize, rng: &mut impl Rng) -> Result<RayBatch> {
    if pool.entries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut batch = RayBatch::default();
    for _ in 0..n {
        let e = pool.entries[rng.random_range(0..pool.entries.len())];
        let (i, p) = (e.image as usize, e.pixel as usize);
        batch.push(pixel_ray(scene, i, p), scene.images[i].pixels[p], scene.images[i].appearance, e.sky);
    }
    Ok(batch)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Losses {
    pub total: f64,
    pub color: f64,
    pub eikonal: f64,
    pub mask: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrads {
    pub field: FieldGrads,
    pub log_inv_std: f64,
}

struct ChunkResult {
    grads: FieldGrads,
    log_inv_std: f64,
    color: f64,
    eikonal: f64,
    mask: f64,
}

struct Normalizers {
    color: f64,
    eikonal: f64,
    mask: f64,
}

/// Loss and gradients of one batch with fixed samples. `samples[r]` belongs
/// to ray `r`; rays with fewer than two samples render as empty.
pub fn evaluate_batch(
    field: &NeuralField,
    density: &LogisticDensity,
    batch: &RayBatch,
    samples: &[RaySamples],
    weights: &LossWeights,
    exec: Exec,
    chunk_rays: usize,
) -> Result<(Losses, BatchGrads)> {
    assert_eq!(batch.len(), samples.len());
    let has = |r: usize| samples[r].len() >= 2;
    let n_color = (0..batch.len()).filter(|&r| !batch.sky[r]).count();
    let n_mask = (0..batch.len()).filter(|&r| batch.sky[r] && has(r)).count();
    let n_eik: usize = (0..batch.len()).filter(|&r| has(r)).map(|r| 2 * samples[r].len() - 1).sum();
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let norm = Normalizers { color: inv(3 * n_color), eikonal: inv(n_eik), mask: inv(n_mask) };

    let ids: Vec<usize> = (0..batch.len()).collect();
    let chunks = exec.map_chunks(&ids, chunk_rays, |_, rays| {
        evaluate_chunk(field, density, batch, samples, rays, weights, &norm)
    });
    let mut grads = field.zero_grads();
    let mut d_log = 0.0;
    let mut losses = Losses::default();
    for c in chunks {
        let c = c?;
        grads.add_assign(&c.grads);
        d_log += c.log_inv_std;
        losses.color += c.color;
        losses.eikonal += c.eikonal;
        losses.mask += c.mask;
    }
    losses.total = weights.color * losses.color + weights.eikonal * losses.eikonal + weights.mask * losses.mask;
    Ok((losses, BatchGrads { field: grads, log_inv_std: d_log }))
}

fn evaluate_chunk(
    field: &NeuralField,
    density: &LogisticDensity,
    batch: &RayBatch,
    samples: &[RaySamples],
    rays: &[usize],
    weights: &LossWeights,
    norm: &Normalizers,
) -> Result<ChunkResult> {
    let mut queries = Vec::new();
    // (ray, first query index, sample count)
    let mut spans = Vec::new();
    for &r in rays {
        let s = &samples[r];
        if s.len() < 2 {
            continue;
        }
        spans.push((r, queries.len(), s.len()));
        let dir = s.ray.direction;
        queries.extend(s.points().into_iter().map(|x| FieldQuery { x, view: None }));
        queries.extend(
            midpoints(&s.t).into_iter().map(|t| FieldQuery { x: s.ray.at(t), view: Some((dir, batch.images[r])) }),
        );
    }
    let mut res = ChunkResult { grads: field.zero_grads(), log_inv_std: 0.0, color: 0.0, eikonal: 0.0, mask: 0.0 };
    // Rays without samples render black with no gradient path.
    for &r in rays {
        if samples[r].len() < 2 && !batch.sky[r] {
            res.color += batch.targets[r].iter().map(|v| v.abs()).sum::<f64>() * norm.color;
        }
    }
    if queries.is_empty() {
        return Ok(res);
    }
    let (out, tape) = field.forward(&queries)?;
    let mut cot = vec![FieldCotangent::default(); queries.len()];
    for (q, o) in out.iter().enumerate() {
        res.eikonal += (o.grad.norm() - 1.0).powi(2) * norm.eikonal;
        cot[q].grad = eikonal_grad(&o.grad) * (weights.eikonal * norm.eikonal);
    }
    for &(r, start, n) in &spans {
        let t = &samples[r].t;
        let sdf: Vec<f64> = out[start..start + n].iter().map(|o| o.sdf).collect();
        let colors: Vec<[f64; 3]> = out[start + n..start + 2 * n - 1].iter().map(|o| o.color.unwrap()).collect();
        let rendered = render(t, &sdf, &colors, density);
        let mut rc = RenderCotangent::default();
        if batch.sky[r] {
            let (l, d) = mask_term(rendered.opacity);
            res.mask += l * norm.mask;
            rc.opacity = weights.mask * d * norm.mask;
        } else {
            for k in 0..3 {
                let diff = rendered.color[k] - batch.targets[r][k];
                res.color += diff.abs() * norm.color;
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                rc.color[k] = weights.color * sign * norm.color;
            }
        }
        let g = render_backward(t, &sdf, &colors, density, &rc);
        res.log_inv_std += g.log_inv_std;
        for i in 0..n {
            cot[start + i].sdf = g.sdf[i];
        }
        for k in 0..n - 1 {
            cot[start + n + k].color = g.colors[k];
        }
    }
    res.grads = field.backward(&tape, &cot)?;
    Ok(res)
}

/// First-moment / second-moment adaptive optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    m_scalar: f64,
    v_scalar: f64,
    steps: u64,
}

impl Adam {
    pub fn new(field: &NeuralField) -> Self {
        let shapes: Vec<usize> = field.tensors().iter().map(|t| t.len()).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            v: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            m_scalar: 0.0,
            v_scalar: 0.0,
            steps: 0,
        }
    }

    /// Updates the field with `lr` and the density sharpness with
    /// `density_lr`.
    pub fn step(
        &mut self,
        field: &mut NeuralField,
        density: &mut LogisticDensity,
        grads: &BatchGrads,
        lr: f64,
        density_lr: f64,
    ) {
        self.steps += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.steps as i32);
        let bc2 = 1.0 - b2.powi(self.steps as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        for (((p, g), m), v) in field.tensors_mut().into_iter().zip(grads.field.tensors()).zip(&mut self.m).zip(&mut self.v) {
            for j in 0..p.len() {
                update(&mut p[j], g[j], &mut m[j], &mut v[j], lr);
            }
        }
        update(&mut density.log_inv_std, grads.log_inv_std, &mut self.m_scalar, &mut self.v_scalar, density_lr);
    }
}

/// Filtered SfM points binned into voxels of size `voxel_size` and dilated.
pub fn build_envelope(scene: &Scene, cfg: &SceneConfig) -> Result<SparseVoxelGrid> {
    let pts = filter_sfm_points(&scene.points, cfg.min_track_len, cfg.max_reproj);
    let positions: Vec<Vec3> = pts.iter().map(|p| p.position).collect();
    let grid = SparseVoxelGrid::from_points(&positions, cfg.voxel_size, Vec3::zeros()).dilate(cfg.dilation_radius);
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(grid)
}

/// Field coordinate frame: envelope center, half of its largest extent.
pub fn frame_from_bounds(bounds: &Aabb) -> Normalization {
    Normalization { center: bounds.center(), scale: 0.5 * bounds.extent().max() }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub iteration: u64,
    pub strategy: Strategy,
    pub losses: Losses,
    pub lr: f64,
    pub inv_std: f64,
    pub cache_refreshed: bool,
}

/// Complete training state for one scene.
#[derive(Clone)]
pub struct Trainer {
    pub config: SceneConfig,
    pub scene: Scene,
    pub grid: SparseVoxelGrid,
    pub bounds: Aabb,
    pub pool: RayPool,
    pub cache: SdfCache,
    pub field: NeuralField,
    pub density: LogisticDensity,
    pub iteration: u64,
    pub adam: Adam,
    pub exec: Exec,
}

impl Trainer {
    pub fn new(config: SceneConfig, scene: Scene, exec: Exec) -> Result<Self> {
        config.validate()?;
        let grid = build_envelope(&scene, &config)?;
        let bounds = grid.bounds().ok_or(Error::EmptyGrid)?;
        let pool = RayPool::build(&scene, &grid, exec);
        let cache = SdfCache::new(&grid, config.octree_depth, config.schedule.refresh_period)?;
        let frame = frame_from_bounds(&bounds);
        let n_images = scene.images.iter().map(|i| i.appearance + 1).max().unwrap_or(0);
        let field = NeuralField::new(config.field.clone(), frame, n_images, config.schedule.seed)?;
        let density = LogisticDensity::for_half_extent(frame.scale);
        let adam = Adam::new(&field);
        Ok(Trainer { config, scene, grid, bounds, pool, cache, field, density, iteration: 0, adam, exec })
    }

    pub fn sampling_config(&self, strategy: Strategy) -> SamplingConfig {
        SamplingConfig::from_scene(&self.config, &self.bounds, strategy)
    }

    /// Samples every batch ray with `strategy`, using per-ray streams derived
    /// from the seed and `iteration`.
    pub fn sample_batch(&self, batch: &RayBatch, strategy: Strategy, iteration: u64) -> Vec<RaySamples> {
        let cfg = self.sampling_config(strategy);
        let cache = (strategy == Strategy::Hybrid).then_some(&self.cache);
        let ctx = SamplerContext { grid: &self.grid, cache, field: &self.field, cfg: &cfg };
        let seed = self.config.schedule.seed;
        self.exec.map_range(batch.len(), |r| ctx.sample(&batch.rays[r], &mut ray_rng(seed, iteration, r as u64)))
    }

    /// Draws this iteration's batch.
    pub fn next_batch(&self) -> Result<RayBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.schedule.seed);
        rng.set_stream(self.iteration + 1);
        make_batch(&self.pool, &self.scene, self.config.schedule.batch_rays, &mut rng)
    }

    /// One optimization step on a freshly drawn batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let batch = self.next_batch()?;
        self.step_with_batch(&batch)
    }

    /// One optimization step on `batch`.
    pub fn step_with_batch(&mut self, batch: &RayBatch) -> Result<StepStats> {
        let it = self.iteration;
        let sched = &self.config.schedule;
        let strategy = sched.strategy_at(it);
        let mut refreshed = false;
        if strategy == Strategy::Hybrid {
            let force = it == sched.bootstrap_iters || self.cache.last_refresh.is_none();
            refreshed = self.cache.refresh_if_due(&self.field, it, force, self.exec);
        }
        let samples = self.sample_batch(batch, strategy, it);
        let (losses, grads) = evaluate_batch(
            &self.field,
            &self.density,
            batch,
            &samples,
            &self.config.loss,
            self.exec,
            self.config.schedule.chunk_rays,
        )?;
        let finite_grads = grads.log_inv_std.is_finite() && grads.field.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()));
        if !losses.total.is_finite() || !finite_grads {
            return Err(Error::NonFinite { iteration: it, detail: diagnostic_dump(&losses, batch, &samples) });
        }
        let lr = self.config.schedule.lr_at(it);
        let density_lr = lr * self.config.schedule.density_lr_scale;
        self.adam.step(&mut self.field, &mut self.density, &grads, lr, density_lr);
        self.iteration += 1;
        Ok(StepStats { iteration: it, strategy, losses, lr, inv_std: self.density.inv_std(), cache_refreshed: refreshed })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            config: self.config.clone(),
            field: self.field.clone(),
            log_inv_std: self.density.log_inv_std,
        }
    }
}

#[derive(Serialize)]
struct DumpRay<'a> {
    origin: [f64; 3],
    direction: [f64; 3],
    image: usize,
    sky: bool,
    target: [f64; 3],
    t: &'a [f64],
}

/// JSON summary of the losses and the first rays of an offending batch.
fn diagnostic_dump(losses: &Losses, batch: &RayBatch, samples: &[RaySamples]) -> String {
    let rays: Vec<DumpRay> = (0..batch.len().min(16))
        .map(|r| DumpRay {
            origin: batch.rays[r].origin.into(),
            direction: batch.rays[r].direction.into(),
            image: batch.images[r],
            sky: batch.sky[r],
            target: batch.targets[r],
            t: &samples[r].t,
        })
        .collect();
    let body = serde_json::json!({ "losses": losses, "batch_rays": batch.len(), "rays": rays });
    body.to_string()
}
